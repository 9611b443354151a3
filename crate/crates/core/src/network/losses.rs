//! Reconstruction losses, each on the tape and as a plain function.

use ndarray::Array2;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::pose::{reconstruct_positions, SkeletonChain};

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn tape_loss_simple(tape: &mut Tape, x0: Var, x0_hat: Var) -> Var {
    let d = tape.sub(x0_hat, x0);
    let sq = tape.square(d);
    tape.mean_all(sq)
}

/// Mean over frames of the summed squared marker error of the reconstructed
/// skeletons; `x0`/`x0_hat` are raw (unstandardized) features.
pub fn tape_loss_pos(tape: &mut Tape, x0: Var, x0_hat: Var, chain: &SkeletonChain) -> Var {
    let frames = tape.value(x0).nrows() as f64;
    let a = reconstruct_positions(tape, x0, chain);
    let b = reconstruct_positions(tape, x0_hat, chain);
    let all_a = tape.concat_cols(&a);
    let all_b = tape.concat_cols(&b);
    let d = tape.sub(all_b, all_a);
    let sq = tape.square(d);
    let s = tape.sum_all(sq);
    tape.scale(s, 1.0 / frames)
}

/// Contact-weighted squared frame-to-frame displacement of foot markers,
/// averaged over frame pairs. `contacts` is `(frames − 1) × feet` with the
/// flag of the first frame of each pair; `feet` index chain markers.
pub fn tape_loss_foot(tape: &mut Tape, x0_hat: Var, chain: &SkeletonChain, feet: &[usize], contacts: &Array2<f64>) -> Var {
    let pairs = tape.value(x0_hat).nrows() - 1;
    let pos = reconstruct_positions(tape, x0_hat, chain);
    let mut total = None;
    for (k, &m) in feet.iter().enumerate() {
        let next = tape.slice_rows(pos[m], 1, pairs);
        let prev = tape.slice_rows(pos[m], 0, pairs);
        let step = tape.sub(next, prev);
        let sq = tape.square(step);
        let dist = tape.row_sum(sq);
        let c = tape.constant(contacts.column(k).to_owned().insert_axis(ndarray::Axis(1)));
        let w = tape.mul(dist, c);
        let s = tape.sum_all(w);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Array2::zeros((1, 1))));
    tape.scale(total, 1.0 / pairs as f64)
}

/// Mean squared error of frame-to-frame feature deltas.
pub fn tape_loss_vel(tape: &mut Tape, x0: Var, x0_hat: Var) -> Var {
    let n = tape.value(x0).nrows() - 1;
    let a1 = tape.slice_rows(x0, 1, n);
    let a0 = tape.slice_rows(x0, 0, n);
    let b1 = tape.slice_rows(x0_hat, 1, n);
    let b0 = tape.slice_rows(x0_hat, 0, n);
    let da = tape.sub(a1, a0);
    let db = tape.sub(b1, b0);
    tape_loss_simple(tape, da, db)
}

fn eval(build: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new();
    let out = build(&mut tape);
    tape.scalar(out)
}

pub fn loss_simple(x0: &Array2<f64>, x0_hat: &Array2<f64>) -> Result<f64> {
    same_shape(x0, x0_hat)?;
    Ok(eval(|t| {
        let (a, b) = (t.constant(x0.clone()), t.constant(x0_hat.clone()));
        tape_loss_simple(t, a, b)
    }))
}

fn check_chain(x: &Array2<f64>, chain: &SkeletonChain) -> Result<()> {
    let want = crate::pose::feature_dim(chain.links().len());
    if x.ncols() != want {
        return Err(Error::Shape(format!("{} feature columns, chain needs {want}", x.ncols())));
    }
    Ok(())
}

pub fn loss_pos(x0: &Array2<f64>, x0_hat: &Array2<f64>, chain: &SkeletonChain) -> Result<f64> {
    same_shape(x0, x0_hat)?;
    check_chain(x0, chain)?;
    let v = eval(|t| {
        let (a, b) = (t.constant(x0.clone()), t.constant(x0_hat.clone()));
        tape_loss_pos(t, a, b, chain)
    });
    if !v.is_finite() {
        return Err(Error::Degenerate("features cannot be decoded".into()));
    }
    Ok(v)
}

/// `feet` name chain markers; `contacts[i][k]` flags foot `k` at frame `i`.
pub fn loss_foot(x0_hat: &Array2<f64>, chain: &SkeletonChain, feet: &[String], contacts: &[Vec<bool>]) -> Result<f64> {
    check_chain(x0_hat, chain)?;
    if contacts.len() != x0_hat.nrows() {
        return Err(Error::Shape(format!(
            "{} contact frames for {} feature frames",
            contacts.len(),
            x0_hat.nrows()
        )));
    }
    if x0_hat.nrows() < 2 {
        return Err(Error::Shape("foot loss needs at least 2 frames".into()));
    }
    let markers = chain.topology().markers();
    let idx = feet
        .iter()
        .map(|f| {
            markers
                .iter()
                .position(|m| m == f)
                .ok_or_else(|| Error::UnknownMarker(f.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = Array2::from_shape_fn((x0_hat.nrows() - 1, feet.len()), |(i, k)| f64::from(u8::from(contacts[i][k])));
    Ok(eval(|t| {
        let b = t.constant(x0_hat.clone());
        tape_loss_foot(t, b, chain, &idx, &c)
    }))
}

pub fn loss_vel(x0: &Array2<f64>, x0_hat: &Array2<f64>) -> Result<f64> {
    same_shape(x0, x0_hat)?;
    if x0.nrows() < 2 {
        return Err(Error::Shape("velocity loss needs at least 2 frames".into()));
    }
    Ok(eval(|t| {
        let (a, b) = (t.constant(x0.clone()), t.constant(x0_hat.clone()));
        tape_loss_vel(t, a, b)
    }))
}
