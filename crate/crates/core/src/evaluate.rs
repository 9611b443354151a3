//! Separability metrics, Fréchet distance between embedding groups and a
//! 2D principal-component view.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::motion::{Technique, MAX_GRADE_INDEX};

const SYM_TOL: f64 = 1e-8;
const FID_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct Separability {
    /// `confusion[truth][prediction]` over all five techniques.
    pub confusion: [[usize; 5]; 5],
    /// Recall per evaluated class, in the order requested.
    pub recalls: Vec<(Technique, f64)>,
    pub uar: f64,
}

/// Confusion matrix and unweighted average recall over `classes`.
pub fn confusion_and_uar(predictions: &[Technique], truths: &[Technique], classes: &[Technique]) -> Result<Separability> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes to evaluate".into()));
    }
    let mut confusion = [[0usize; 5]; 5];
    for (p, t) in predictions.iter().zip(truths) {
        confusion[t.index()][p.index()] += 1;
    }
    let recalls = classes
        .iter()
        .map(|&c| {
            let row = &confusion[c.index()];
            let total: usize = row.iter().sum();
            if total == 0 {
                return Err(Error::InvalidArgument(format!("class {c} has no ground-truth samples")));
            }
            Ok((c, row[c.index()] as f64 / total as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let uar = recalls.iter().map(|r| r.1).sum::<f64>() / recalls.len() as f64;
    Ok(Separability { confusion, recalls, uar })
}

#[derive(Clone, Debug, Serialize)]
pub struct GradeMae {
    /// Mean of per-grade MAEs on the `[0, 1]` scale.
    pub mae: f64,
    /// `mae` in grade steps.
    pub mae_grades: f64,
    /// Plain mean over samples.
    pub micro_mae: f64,
    pub per_grade: Vec<(u8, f64)>,
}

/// Grade error macro-averaged over the true grade levels.
pub fn grade_mae(predicted: &[f64], truth: &[f64]) -> Result<GradeMae> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let scale = MAX_GRADE_INDEX as f64;
    let mut sums = vec![(0.0, 0usize); MAX_GRADE_INDEX as usize + 1];
    for (p, t) in predicted.iter().zip(truth) {
        let g = (t * scale).round().clamp(0.0, scale) as usize;
        sums[g].0 += (p - t).abs();
        sums[g].1 += 1;
    }
    let per_grade: Vec<(u8, f64)> = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.1 > 0)
        .map(|(g, s)| (g as u8, s.0 / s.1 as f64))
        .collect();
    let mae = per_grade.iter().map(|g| g.1).sum::<f64>() / per_grade.len() as f64;
    let micro_mae = predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64;
    Ok(GradeMae {
        mae,
        mae_grades: mae * scale,
        micro_mae,
        per_grade,
    })
}

/// Symmetric PSD square root by eigendecomposition, clipping tiny negative
/// eigenvalues to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.norm().max(1.0);
    if (m - m.transpose()).norm() > SYM_TOL * scale {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -SYM_TOL * scale {
            return Err(Error::InvalidArgument(format!("matrix is indefinite (eigenvalue {min})")));
        }
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::InvalidArgument("empty group".into()))?;
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("embeddings have differing dimensions".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Mean and unbiased covariance of the rows; `true` when the group is too
/// small for a full-rank estimate and a ridge was added.
fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, bool) {
    let (n, d) = x.shape();
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = if n > 1 {
        centered.transpose() * &centered / (n as f64 - 1.0)
    } else {
        DMatrix::zeros(d, d)
    };
    let small = n < d + 1;
    if small {
        cov += DMatrix::identity(d, d) * FID_RIDGE;
    }
    (mean, cov, small)
}

#[derive(Clone, Debug, Serialize)]
pub struct FidReport {
    pub fid: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// A group had fewer than `d + 1` samples and was ridge-regularized.
    pub regularized: bool,
}

/// Fréchet distance between Gaussian fits of two embedding groups.
pub fn fid(group_a: &[Vec<f64>], group_b: &[Vec<f64>]) -> Result<FidReport> {
    let a = to_matrix(group_a)?;
    let b = to_matrix(group_b)?;
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("groups have dimensions {} and {}", a.ncols(), b.ncols())));
    }
    let (mu_a, cov_a, small_a) = moments(&a);
    let (mu_b, cov_b, small_b) = moments(&b);
    let regularized = small_a || small_b;
    if regularized || a.nrows() < 50 || b.nrows() < 50 {
        log::warn!(
            "FID from {} and {} samples in {} dimensions is unreliable",
            a.nrows(),
            b.nrows(),
            a.ncols()
        );
    }
    let root_a = sqrt_psd(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let cross = sqrt_psd(&((&inner + inner.transpose()) * 0.5))?;
    let value = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(FidReport {
        fid: value.max(0.0),
        n_a: a.nrows(),
        n_b: b.nrows(),
        regularized,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance along each returned component.
    pub variances: [f64; 2],
    /// Number of non-negligible principal directions found (capped at 2).
    pub rank: usize,
}

/// Projection onto the top two principal components of the centered data.
/// The largest-magnitude loading of each component is made positive.
pub fn pca_project_2d(embeddings: &[Vec<f64>]) -> Result<Projection> {
    if embeddings.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "projection needs at least 3 embeddings, got {}",
            embeddings.len()
        )));
    }
    let x = to_matrix(embeddings)?;
    let (n, d) = x.shape();
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let tol = 1e-12 * cov.trace().max(1e-300);
    let rank = order.iter().take(2).filter(|&&i| eig.eigenvalues[i] > tol).count();
    if rank < 2 {
        log::warn!("embeddings span {rank} principal direction(s); missing axes are zero");
    }
    let mut axes = Vec::with_capacity(2);
    let mut variances = [0.0; 2];
    for k in 0..2 {
        if k < rank && k < d {
            let mut v = eig.eigenvectors.column(order[k]).into_owned();
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            variances[k] = eig.eigenvalues[order[k]];
            axes.push(Some(v));
        } else {
            axes.push(None);
        }
    }
    let points = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |a: &Option<DVector<f64>>| a.as_ref().map_or(0.0, |v| row.dot(&v.transpose()));
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect();
    Ok(Projection { points, variances, rank })
}

/// `label,pc1,pc2` rows.
pub fn projection_csv(labels: &[String], projection: &Projection) -> String {
    let mut out = String::from("label,pc1,pc2\n");
    for (l, p) in labels.iter().zip(&projection.points) {
        out.push_str(&format!("{l},{},{}\n", p[0], p[1]));
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use Technique::*;

    #[test]
    fn uar_cases() {
        let t = [RP, RP, FK, FK];
        let s = confusion_and_uar(&t, &t, &[RP, FK]).unwrap();
        assert_eq!(s.uar, 1.0);
        assert_eq!(s.confusion[0][0], 2);
        assert_eq!(s.confusion[1][1], 2);
        let p = [RP, RP, FK, RP];
        let s = confusion_and_uar(&p, &t, &[RP, FK]).unwrap();
        assert!((s.uar - 0.75).abs() < 1e-15);
        assert_eq!(s.confusion[FK.index()][RP.index()], 1);
        assert!(confusion_and_uar(&p, &t, &[RP, SBK]).is_err());
        assert!(confusion_and_uar(&p[..2], &t, &[RP]).is_err());
    }

    #[test]
    fn mae_cases() {
        let truth = [0.0, 0.5, 1.0, 1.0];
        assert_eq!(grade_mae(&truth, &truth).unwrap().mae, 0.0);
        let pred: Vec<f64> = truth.iter().map(|t| t - 0.1).collect();
        let m = grade_mae(&pred, &truth).unwrap();
        assert!((m.mae - 0.1).abs() < 1e-12);
        assert!((m.mae_grades - 1.2).abs() < 1e-12);
        // Grade 12 has errors 0.4 and 0, grade 0 has 0: macro 0.1, micro 0.1.
        let m = grade_mae(&[0.0, 0.6, 1.0], &[0.0, 1.0, 1.0]).unwrap();
        assert!((m.mae - 0.1).abs() < 1e-12);
        assert!((m.micro_mae - 0.4 / 3.0).abs() < 1e-12);
        assert!(grade_mae(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn sqrt_cases() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((sqrt_psd(&i).unwrap() - &i).norm() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = sqrt_psd(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(sqrt_psd(&bad).is_err());
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(sqrt_psd(&neg).is_err());
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d + 2, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        a.transpose() * a
    }

    #[test]
    fn sqrt_reconstructs_and_roots_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [1, 2, 5, 16] {
            let m = random_psd(&mut rng, d);
            let s = sqrt_psd(&m).unwrap();
            assert!((&s * &s - &m).norm() / m.norm() < 1e-8);
            let mut want: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.sqrt()).collect();
            let mut got: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
            want.sort_by(f64::total_cmp);
            got.sort_by(f64::total_cmp);
            for (a, b) in want.iter().zip(&got) {
                assert!((a - b).abs() < 1e-8 * want.last().unwrap().max(1.0));
            }
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, mean: &[f64]) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn fid_gaussian_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(&mut rng, 10_000, &[0.0, 0.0]);
        let b = gaussian(&mut rng, 10_000, &[3.0, 0.0]);
        let f = fid(&a, &b).unwrap().fid;
        assert!((f - 9.0).abs() < 0.5, "{f}");
        assert!(fid(&a, &a).unwrap().fid.abs() < 1e-8);
        assert!(fid(&[], &a).is_err());
    }

    #[test]
    fn fid_small_groups_are_regularized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(&mut rng, 4, &[0.0; 8]);
        let b = gaussian(&mut rng, 4, &[1.0; 8]);
        let r = fid(&a, &b).unwrap();
        assert!(r.regularized && r.fid.is_finite());
    }

    #[test]
    fn fid_symmetric_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian(&mut rng, 200, &[0.0, 1.0, 2.0]);
        let b: Vec<Vec<f64>> = gaussian(&mut rng, 150, &[1.0, 0.0, 0.0])
            .into_iter()
            .map(|v| vec![v[0] * 2.0, v[1], v[2] * 0.5 + v[0]])
            .collect();
        let ab = fid(&a, &b).unwrap().fid;
        let ba = fid(&b, &a).unwrap().fid;
        assert!((ab - ba).abs() < 1e-8);
        let q = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let rot = |g: &[Vec<f64>]| -> Vec<Vec<f64>> {
            g.iter()
                .map(|v| (q * nalgebra::Vector3::new(v[0], v[1], v[2])).iter().copied().collect())
                .collect()
        };
        let rotated = fid(&rot(&a), &rot(&b)).unwrap().fid;
        assert!((rotated - ab).abs() < 1e-6);
    }

    #[test]
    fn pca_plane_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, v) = (
            DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![0.0, 0.6, 0.8, 0.0, 0.0]),
        );
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
                (&u * a + &v * b).iter().map(|x| x + 0.5).collect()
            })
            .collect();
        let p = pca_project_2d(&pts).unwrap();
        assert_eq!(p.rank, 2);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let orig: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let proj = ((p.points[i][0] - p.points[j][0]).powi(2) + (p.points[i][1] - p.points[j][1]).powi(2)).sqrt();
                assert!((orig - proj).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mean_b = vec![0.0; 8];
        mean_b[3] = 20.0;
        let mut pts = gaussian(&mut rng, 50, &[0.0; 8]);
        pts.extend(gaussian(&mut rng, 50, &mean_b));
        let p = pca_project_2d(&pts).unwrap();
        let centroid = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            let c = r.clone().fold([0.0, 0.0], |acc, i| [acc[0] + p.points[i][0], acc[1] + p.points[i][1]]);
            let c = [c[0] / n, c[1] / n];
            let spread = (r.map(|i| (p.points[i][0] - c[0]).powi(2) + (p.points[i][1] - c[1]).powi(2)).sum::<f64>() / n).sqrt();
            (c, spread)
        };
        let (ca, sa) = centroid(0..50);
        let (cb, sb) = centroid(50..100);
        let gap = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
        assert!(gap > 5.0 * sa.max(sb));
    }

    #[test]
    fn pca_degenerate() {
        let p = pca_project_2d(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert_eq!(p.rank, 0);
        assert!(p.points.iter().all(|q| q == &[0.0, 0.0]));
        assert!(pca_project_2d(&vec![vec![1.0]; 2]).is_err());
    }

    proptest! {
        #[test]
        fn uar_relabel_invariant(pairs in prop::collection::vec((0usize..3, 0usize..3), 3..40), shift in 1usize..5) {
            let truth: Vec<Technique> = pairs.iter().map(|p| Technique::from_index(p.1).unwrap()).collect();
            let pred: Vec<Technique> = pairs.iter().map(|p| Technique::from_index(p.0).unwrap()).collect();
            let present: Vec<Technique> = Technique::ALL.iter().copied().filter(|c| truth.contains(c)).collect();
            let relabel = |t: &Technique| Technique::from_index((t.index() + shift) % 5).unwrap();
            let a = confusion_and_uar(&pred, &truth, &present).unwrap().uar;
            let b = confusion_and_uar(
                &pred.iter().map(relabel).collect::<Vec<_>>(),
                &truth.iter().map(relabel).collect::<Vec<_>>(),
                &present.iter().map(relabel).collect::<Vec<_>>(),
            ).unwrap().uar;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
