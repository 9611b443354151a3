use serde::{Deserialize, Serialize};

use super::head::{AttributeHead, Prediction, CLASSES};
use crate::error::{Error, Result};
use crate::motion::Technique;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Direction {
    TechniqueChange { source: Technique, target: Technique },
    /// Towards higher grades when `increase`, lower otherwise.
    GradeChange { increase: bool },
}

/// Unit vector in standardized code space.
pub fn direction(head: &AttributeHead, kind: Direction) -> Result<Vec<f64>> {
    let raw: Vec<f64> = match kind {
        Direction::TechniqueChange { source, target } => {
            if source == target {
                return Err(Error::InvalidArgument(format!("source and target technique are both {source}")));
            }
            let (ws, wt) = (
                &head.technique_weights[source.index()],
                &head.technique_weights[target.index()],
            );
            wt.iter().zip(ws).map(|(t, s)| t - s).collect()
        }
        Direction::GradeChange { increase } => {
            let sign = if increase { 1.0 } else { -1.0 };
            head.grade_weights.iter().map(|w| sign * w).collect()
        }
    };
    normalized(raw).ok_or_else(|| Error::Degenerate("head weights give no direction".into()))
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaSearch {
    pub step: f64,
    pub eps_conv: f64,
    pub window: usize,
    pub cap: f64,
}

impl Default for LambdaSearch {
    fn default() -> Self {
        LambdaSearch {
            step: 0.1,
            eps_conv: 1e-3,
            window: 5,
            cap: 50.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaMax {
    pub lambda_max: f64,
    /// The predictions had not settled by the cap.
    pub capped: bool,
}

fn shifted(x: &[f64], d: &[f64], lambda: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + lambda * b).collect()
}

fn max_change(a: &Prediction, b: &Prediction) -> f64 {
    a.probs
        .iter()
        .zip(&b.probs)
        .map(|(p, q)| (p - q).abs())
        .fold((a.grade - b.grade).abs(), f64::max)
}

/// Predictions of a linear head as `λ → ∞` along `d`: the softmax keeps only
/// the classes with the steepest logit slope, the grade saturates.
fn limit_prediction(head: &AttributeHead, x: &[f64], d: &[f64]) -> Prediction {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let slopes: [f64; CLASSES] = std::array::from_fn(|c| dot(&head.technique_weights[c], d));
    let steepest = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * steepest.abs().max(1.0);
    let mut logits: [f64; CLASSES] = std::array::from_fn(|c| dot(&head.technique_weights[c], x) + head.technique_bias[c]);
    let top = (0..CLASSES)
        .filter(|&c| slopes[c] >= steepest - tol)
        .map(|c| logits[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; CLASSES];
    for c in 0..CLASSES {
        if slopes[c] >= steepest - tol {
            logits[c] = (logits[c] - top).exp();
            probs[c] = logits[c];
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let slope = dot(&head.grade_weights, d);
    let flat = 1e-9 * dot(&head.grade_weights, &head.grade_weights).sqrt() * dot(d, d).sqrt();
    let grade = if slope > flat {
        1.0
    } else if slope < -flat {
        0.0
    } else {
        (dot(&head.grade_weights, x) + head.grade_bias).clamp(0.0, 1.0)
    };
    Prediction { probs, grade }
}

/// Smallest grid point `k·step` whose last `window` moves along `d` all
/// change the predictions by less than `eps_conv` and whose predictions are
/// within `eps_conv` of their limit. `z` is a raw code and `d` a
/// standardized-space direction.
pub fn find_lambda_max(head: &AttributeHead, z: &[f64], d: &[f64], search: &LambdaSearch) -> Result<LambdaMax> {
    if !(search.step > 0.0) || search.window == 0 || !(search.cap >= search.step) {
        return Err(Error::InvalidArgument(
            "λ search needs step > 0, window ≥ 1 and cap ≥ step".into(),
        ));
    }
    if d.len() != head.dim() {
        return Err(Error::Shape(format!("direction has {} entries, head expects {}", d.len(), head.dim())));
    }
    let x = head.z_stats.standardize(z);
    let at = |k: usize| head.predict_standardized(&shifted(&x, d, k as f64 * search.step));
    let last = (search.cap / search.step).floor() as usize;
    let limit = limit_prediction(head, &x, d);
    let mut prev = head.predict(z)?;
    let mut settled = 0;
    for k in 1..=last {
        let next = at(k);
        if max_change(&prev, &next) < search.eps_conv {
            settled += 1;
            if settled >= search.window && max_change(&next, &limit) < search.eps_conv {
                return Ok(LambdaMax {
                    lambda_max: k as f64 * search.step,
                    capped: false,
                });
            }
        } else {
            settled = 0;
        }
        prev = next;
    }
    log::warn!("attribute predictions did not converge before λ = {}", search.cap);
    Ok(LambdaMax {
        lambda_max: search.cap,
        capped: true,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub technique: Option<Technique>,
    /// Grade on the `[0, 1]` scale.
    pub grade: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuideOptions {
    pub search: LambdaSearch,
    pub grid: usize,
}

impl Default for GuideOptions {
    fn default() -> Self {
        GuideOptions {
            search: LambdaSearch::default(),
            grid: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub lambda: f64,
    pub score: f64,
    pub probs: [f64; CLASSES],
    pub grade: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manipulation {
    /// Chosen code, de-standardized.
    pub z: Vec<f64>,
    pub lambda: f64,
    pub lambda_max: f64,
    pub capped: bool,
    pub trace: Vec<TracePoint>,
}

fn score(p: &Prediction, probs_target: &[f64; CLASSES], grade_target: f64) -> f64 {
    let tech = p
        .probs
        .iter()
        .zip(probs_target)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    0.5 * tech + 0.5 * (p.grade - grade_target).abs()
}

/// Projects `d` onto the orthogonal complement of `axes`, so every head
/// output that is linear in those axes stays fixed. Falls back to `d` if
/// nothing is left.
fn holding(d: Vec<f64>, axes: impl IntoIterator<Item = Vec<f64>>) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut a in axes {
        let scale = dot(&a, &a).sqrt();
        for b in &basis {
            let c = dot(&a, b);
            a.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        if dot(&a, &a).sqrt() > 1e-9 * scale {
            basis.extend(normalized(a));
        }
    }
    let mut rest = d.clone();
    for b in &basis {
        let c = dot(&rest, b);
        rest.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
    normalized(rest).filter(|r| dot(r, &d) > 1e-6).unwrap_or(d)
}

/// Moves `z` along the head's direction towards the targets and keeps the
/// grid point scoring closest to them. An unset target is pinned to the
/// current prediction, and the direction is projected so the head output
/// for that attribute does not move.
pub fn guided_manipulate(z: &[f64], head: &AttributeHead, targets: &Targets, options: &GuideOptions) -> Result<Manipulation> {
    if targets.technique.is_none() && targets.grade.is_none() {
        return Err(Error::InvalidArgument("no manipulation target given".into()));
    }
    if let Some(g) = targets.grade {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::InvalidArgument(format!("target grade {g} outside [0, 1]")));
        }
    }
    if options.grid < 2 {
        return Err(Error::InvalidArgument("the λ grid needs at least 2 points".into()));
    }
    let current = head.predict(z)?;
    let probs_target = match targets.technique {
        Some(t) => std::array::from_fn(|c| f64::from(u8::from(c == t.index()))),
        None => current.probs,
    };
    let grade_target = targets.grade.unwrap_or(current.grade);

    let mut parts = Vec::new();
    if let Some(t) = targets.technique {
        let source = current.technique();
        if source != t {
            let d = direction(head, Direction::TechniqueChange { source, target: t })?;
            parts.push(match targets.grade {
                None => holding(d, [head.grade_weights.clone()]),
                Some(_) => d,
            });
        }
    }
    if let Some(g) = targets.grade {
        if g != current.grade {
            let d = direction(head, Direction::GradeChange { increase: g > current.grade })?;
            parts.push(match targets.technique {
                None => {
                    let s = current.technique().index();
                    let logit_gaps = (0..CLASSES).filter(|&c| c != s).map(|c| {
                        let (wc, ws) = (&head.technique_weights[c], &head.technique_weights[s]);
                        wc.iter().zip(ws).map(|(a, b)| a - b).collect()
                    });
                    holding(d, logit_gaps)
                }
                Some(_) => d,
            });
        }
    }
    let d = parts.into_iter().reduce(|a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let Some(d) = d.and_then(normalized) else {
        return Ok(Manipulation {
            z: z.to_vec(),
            lambda: 0.0,
            lambda_max: 0.0,
            capped: false,
            trace: vec![TracePoint {
                lambda: 0.0,
                score: score(&current, &probs_target, grade_target),
                probs: current.probs,
                grade: current.grade,
            }],
        });
    };

    let found = find_lambda_max(head, z, &d, &options.search)?;
    let x = head.z_stats.standardize(z);
    let trace: Vec<TracePoint> = (0..options.grid)
        .map(|i| {
            let lambda = found.lambda_max * i as f64 / (options.grid - 1) as f64;
            let p = if i == 0 {
                current.clone()
            } else {
                head.predict_standardized(&shifted(&x, &d, lambda))
            };
            TracePoint {
                lambda,
                score: score(&p, &probs_target, grade_target),
                probs: p.probs,
                grade: p.grade,
            }
        })
        .collect();
    let best = trace
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.score.total_cmp(&b.1.score))
        .map_or(0, |(i, _)| i);
    let lambda = trace[best].lambda;
    let z_new = if best == 0 {
        z.to_vec()
    } else {
        head.z_stats.destandardize(&shifted(&x, &d, lambda))
    };
    Ok(Manipulation {
        z: z_new,
        lambda,
        lambda_max: found.lambda_max,
        capped: found.capped,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manipulate::head::{HeadConfig, ZStats};
    use crate::motion::{LimbSide, SampleMeta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_stats(d: usize) -> ZStats {
        ZStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    fn toy_head() -> AttributeHead {
        let mut h = AttributeHead::zeros(unit_stats(3));
        h.technique_weights[Technique::LRK.index()] = vec![-2.0, 0.0, 0.0];
        h.technique_weights[Technique::HRK.index()] = vec![2.0, 0.0, 0.0];
        h.technique_bias = [-5.0, -5.0, 0.0, 0.0, -5.0];
        h.grade_weights = vec![0.0, 0.2, 0.0];
        h.grade_bias = 0.5;
        h
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn directions_are_unit_and_antisymmetric() {
        let h = toy_head();
        let up = direction(&h, Direction::GradeChange { increase: true }).unwrap();
        let down = direction(&h, Direction::GradeChange { increase: false }).unwrap();
        assert!((norm(&up) - 1.0).abs() < 1e-12);
        assert!(up.iter().zip(&down).all(|(a, b)| *a == -*b));
        let ab = direction(&h, Direction::TechniqueChange { source: Technique::LRK, target: Technique::HRK }).unwrap();
        let ba = direction(&h, Direction::TechniqueChange { source: Technique::HRK, target: Technique::LRK }).unwrap();
        assert!((norm(&ab) - 1.0).abs() < 1e-12);
        assert!(ab.iter().zip(&ba).all(|(a, b)| *a == -*b));
        assert!(direction(&h, Direction::TechniqueChange { source: Technique::RP, target: Technique::RP }).is_err());
    }

    #[test]
    fn planted_grade_direction() {
        let (zs, labels, planted) = crate::manipulate::head::tests::planted_grades(5, 300, 6);
        let head = AttributeHead::train(&zs, &labels, &HeadConfig::default()).unwrap();
        // Compare in raw code space: a standardized step d moves raw z by d·std.
        let d = direction(&head, Direction::GradeChange { increase: true }).unwrap();
        let raw: Vec<f64> = d.iter().zip(&head.z_stats.std).map(|(a, s)| a / s).collect();
        let cos = raw.iter().zip(&planted).map(|(a, b)| a * b).sum::<f64>() / norm(&raw);
        assert!(cos > 0.99, "{cos}");
    }

    /// Along +x the HRK probability is the logistic of 4λ; scan the closed
    /// form for the first grid point where the last steps are flat and the
    /// probability is within ε of 1.
    #[test]
    fn saturating_head_converges_before_cap() {
        let mut h = AttributeHead::zeros(unit_stats(1));
        h.technique_weights[Technique::HRK.index()] = vec![2.0];
        h.technique_weights[Technique::LRK.index()] = vec![-2.0];
        h.technique_bias = [-50.0, -50.0, 0.0, 0.0, -50.0];
        let search = LambdaSearch::default();
        let found = find_lambda_max(&h, &[0.0], &[1.0], &search).unwrap();
        assert!(!found.capped);
        let p = |l: f64| 1.0 / (1.0 + (-4.0 * l).exp());
        let oracle = (search.window..)
            .find(|&k| {
                (k - search.window + 1..=k).all(|j| {
                    let (a, b) = ((j - 1) as f64 * search.step, j as f64 * search.step);
                    (p(b) - p(a)).abs() < search.eps_conv
                }) && 1.0 - p(k as f64 * search.step) < search.eps_conv
            })
            .unwrap() as f64
            * search.step;
        assert!((found.lambda_max - oracle).abs() < 1e-9, "{} vs {oracle}", found.lambda_max);
    }

    #[test]
    fn orthogonal_direction_converges_immediately() {
        let h = toy_head();
        let search = LambdaSearch::default();
        let found = find_lambda_max(&h, &[0.3, 0.1, 0.0], &[0.0, 0.0, 1.0], &search).unwrap();
        assert_eq!(found.lambda_max, search.window as f64 * search.step);
        assert!(!found.capped);
    }

    #[test]
    fn zero_tolerance_hits_the_cap() {
        let mut h = AttributeHead::zeros(unit_stats(1));
        h.technique_weights[0] = vec![0.01];
        let search = LambdaSearch {
            eps_conv: 0.0,
            cap: 5.0,
            ..LambdaSearch::default()
        };
        let found = find_lambda_max(&h, &[0.0], &[1.0], &search).unwrap();
        assert!(found.capped);
        assert_eq!(found.lambda_max, 5.0);
    }

    #[test]
    fn current_targets_leave_code_unchanged() {
        let h = toy_head();
        let z = vec![0.7, -0.4, 1.1];
        let p = h.predict(&z).unwrap();
        for targets in [
            Targets {
                technique: Some(p.technique()),
                grade: Some(p.grade),
            },
            Targets {
                technique: None,
                grade: Some(p.grade),
            },
        ] {
            let m = guided_manipulate(&z, &h, &targets, &GuideOptions::default()).unwrap();
            assert_eq!(m.lambda, 0.0);
            assert_eq!(m.z, z);
        }
    }

    /// Head whose grade and technique weights overlap, so an unprojected
    /// move along either direction would shift the other attribute.
    fn entangled_head() -> AttributeHead {
        let mut h = toy_head();
        h.technique_weights[Technique::LRK.index()] = vec![-2.0, -1.0, 0.5];
        h.technique_weights[Technique::HRK.index()] = vec![2.0, 1.0, -0.5];
        h.grade_weights = vec![0.1, 0.2, 0.05];
        h
    }

    #[test]
    fn technique_change_holds_the_pinned_grade() {
        let h = entangled_head();
        let z = vec![-0.8, 0.1, 0.3];
        let before = h.predict(&z).unwrap();
        assert_eq!(before.technique(), Technique::LRK);
        let targets = Targets {
            technique: Some(Technique::HRK),
            grade: None,
        };
        let m = guided_manipulate(&z, &h, &targets, &GuideOptions::default()).unwrap();
        let after = h.predict(&m.z).unwrap();
        assert_eq!(after.technique(), Technique::HRK);
        assert!((after.grade - before.grade).abs() < 1e-9);
    }

    #[test]
    fn grade_change_holds_the_pinned_probabilities() {
        let h = entangled_head();
        let z = vec![-0.8, 0.1, 0.3];
        let before = h.predict(&z).unwrap();
        let targets = Targets {
            technique: None,
            grade: Some(0.9),
        };
        let m = guided_manipulate(&z, &h, &targets, &GuideOptions::default()).unwrap();
        let after = h.predict(&m.z).unwrap();
        assert!(after.grade > before.grade + 0.1);
        for (a, b) in after.probs.iter().zip(&before.probs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_targets_are_rejected() {
        let h = toy_head();
        assert!(guided_manipulate(&[0.0; 3], &h, &Targets::default(), &GuideOptions::default()).is_err());
    }

    #[test]
    fn planted_clusters_flip_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sample = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f64> {
            let mut z: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            z[0] += if class == 0 { -3.0 } else { 3.0 };
            z[1] += 2.0 * z[2];
            z
        };
        let tech = [Technique::LRK, Technique::HRK];
        let (zs, labels): (Vec<_>, Vec<_>) = (0..200)
            .map(|i| {
                let c = i % 2;
                let meta = SampleMeta {
                    participant: "p".into(),
                    technique: tech[c],
                    grade_index: 6,
                    limb_side: LimbSide::Right,
                };
                (sample(&mut rng, c), meta)
            })
            .unzip();
        let head = AttributeHead::train(&zs, &labels, &HeadConfig::default()).unwrap();
        let held: Vec<(Vec<f64>, usize)> = (0..200).map(|i| (sample(&mut rng, i % 2), i % 2)).collect();
        let flipped = held
            .iter()
            .filter(|(z, c)| {
                let target = tech[1 - c];
                let m = guided_manipulate(
                    z,
                    &head,
                    &Targets {
                        technique: Some(target),
                        grade: None,
                    },
                    &GuideOptions::default(),
                )
                .unwrap();
                head.predict(&m.z).unwrap().technique() == target
            })
            .count();
        assert!(flipped as f64 >= 0.95 * held.len() as f64, "{flipped}");
    }

    #[test]
    fn positive_rescaling_keeps_argmax() {
        let h = toy_head();
        let mut scaled = h.clone();
        scaled.technique_weights.iter_mut().flatten().for_each(|w| *w *= 3.7);
        scaled.technique_bias.iter_mut().for_each(|b| *b *= 3.7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            assert_eq!(h.predict(&z).unwrap().technique(), scaled.predict(&z).unwrap().technique());
        }
    }
}
