//! Axis-angle extraction, Rodrigues rotations and the 6D (Stiefel)
//! rotation encoding with its Gram-Schmidt inverse.

use nalgebra::{Matrix3, Matrix3x2, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;
/// Angles this close to 0 (or to pi) use the degenerate-axis conventions.
pub const ANGLE_EPS: f64 = 1e-8;
/// Tolerance on unit axes.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle {
    pub axis: Vec3,
    pub angle: f64,
}

fn normalized(v: &Vec3, what: &str) -> Result<Vec3> {
    let n = v.norm();
    if n < NORM_EPS {
        return Err(Error::Degenerate(format!("{what} has zero length")));
    }
    Ok(v / n)
}

/// Unit vector orthogonal to `v`, taken from the coordinate axis in which
/// `v` is smallest.
pub fn orthogonal_unit(v: &Vec3) -> Vec3 {
    let k = v.iamin();
    let mut e = Vec3::zeros();
    e[k] = 1.0;
    let u = e - v * v.dot(&e) / v.norm_squared();
    u.normalize()
}

/// Rotation about parent marker `a` taking the direction towards the
/// origin, `-a/|a|`, onto the direction towards `b`.
pub fn axis_angle_between(a: &Vec3, b: &Vec3) -> Result<AxisAngle> {
    let a_dir = normalized(&(-a), "parent position")?;
    let b_dir = normalized(&(b - a), "link")?;
    let cross = a_dir.cross(&b_dir);
    let s = cross.norm();
    let angle = s.atan2(a_dir.dot(&b_dir));
    if angle < ANGLE_EPS {
        return Ok(AxisAngle {
            axis: Vec3::z(),
            angle: 0.0,
        });
    }
    if std::f64::consts::PI - angle < ANGLE_EPS {
        return Ok(AxisAngle {
            axis: orthogonal_unit(&a_dir),
            angle: std::f64::consts::PI,
        });
    }
    Ok(AxisAngle {
        axis: cross / s,
        angle,
    })
}

fn check_unit(k: &Vec3) -> Result<()> {
    if (k.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidArgument(format!(
            "rotation axis must be unit length, |k| = {}",
            k.norm()
        )));
    }
    Ok(())
}

fn skew(k: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0)
}

/// `R = I + sin(theta) K + (1 - cos(theta)) K^2`.
pub fn rodrigues_matrix(k: &Vec3, theta: f64) -> Result<Matrix3<f64>> {
    check_unit(k)?;
    let kx = skew(k);
    Ok(Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos()))
}

/// Rotates `v` about the unit axis `u` by `theta`.
pub fn rotate_rodrigues(u: &Vec3, theta: f64, v: &Vec3) -> Result<Vec3> {
    check_unit(u)?;
    let (s, c) = theta.sin_cos();
    Ok(v * c + u.cross(v) * s + u * (u.dot(v) * (1.0 - c)))
}

/// Drops the last column.
pub fn to_stiefel(r: &Matrix3<f64>) -> Matrix3x2<f64> {
    r.fixed_columns::<2>(0).into_owned()
}

/// Gram-Schmidt completion of a 3x2 block to a proper rotation.
pub fn from_stiefel(m: &Matrix3x2<f64>) -> Result<Matrix3<f64>> {
    let r1 = m.column(0).into_owned();
    let r2 = m.column(1).into_owned();
    let n1 = r1.norm();
    if n1 < NORM_EPS {
        return Err(Error::Degenerate("first Stiefel column is zero".into()));
    }
    let c1 = r1 / n1;
    let r2p = r2 - c1 * c1.dot(&r2);
    let n2 = r2p.norm();
    if n2 < NORM_EPS {
        return Err(Error::Degenerate("Stiefel columns are collinear".into()));
    }
    let c2 = r2p / n2;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Rotation angle from the trace, in `[0, pi]`.
pub fn angle_of(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Unit eigenvector of `r` for eigenvalue 1, signed so that rotating by
/// `theta` about it reproduces `r`.
pub fn axis_of(r: &Matrix3<f64>, theta: f64) -> Result<Vec3> {
    if theta < ANGLE_EPS {
        return Err(Error::Degenerate("rotation axis is indeterminate at angle 0".into()));
    }
    // (R - I) has rank 2; its null space is spanned by the cross product of
    // its two most independent rows.
    let a = r - Matrix3::identity();
    let rows = [
        a.row(0).transpose(),
        a.row(1).transpose(),
        a.row(2).transpose(),
    ];
    let k = [(0, 1), (0, 2), (1, 2)]
        .iter()
        .map(|&(i, j)| rows[i].cross(&rows[j]))
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
        .unwrap();
    let k = normalized(&k, "rotation axis")?;
    let err = |axis: &Vec3| -> Result<f64> { Ok((rodrigues_matrix(axis, theta)? - r).norm()) };
    if err(&(-k))? < err(&k)? {
        Ok(-k)
    } else {
        Ok(k)
    }
}

/// Inverse of [`axis_angle_between`] given the link length `d`.
pub fn reconstruct_marker(a: &Vec3, k: &Vec3, theta: f64, d: f64) -> Result<Vec3> {
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!("link length must be positive, got {d}")));
    }
    let a_dir = normalized(&(-a), "parent position")?;
    let u = normalized(k, "rotation axis")?;
    Ok(rotate_rodrigues(&u, theta, &a_dir)? * d + a)
}
