use ndarray::Array2;

use super::{SkeletonChain, LINK_DIM, ROOT_DIM};
use crate::autograd::{Tape, Var};

fn normalize_rows(tape: &mut Tape, v: Var) -> Var {
    let sq = tape.square(v);
    let n2 = tape.row_sum(sq);
    let n = tape.sqrt(n2);
    let ones = tape.constant(Array2::ones(tape.value(n).raw_dim()));
    let inv = tape.div(ones, n);
    tape.mul_col(v, inv)
}

fn dot_rows(tape: &mut Tape, a: Var, b: Var) -> Var {
    let p = tape.mul(a, b);
    tape.row_sum(p)
}

/// Differentiable form of [`decode_sequence`](super::decode_sequence).
///
/// `features` is `frames × (3 + 6·links)` in the flat layout. Returns one
/// `frames × 3` node per marker, root first then each link's child.
pub fn reconstruct_positions(tape: &mut Tape, features: Var, chain: &SkeletonChain) -> Vec<Var> {
    let parents = chain.topology().parent_indices();
    let mut pos = vec![tape.slice_cols(features, 0, ROOT_DIM)];
    for (l, &d) in chain.distances().iter().enumerate() {
        let off = ROOT_DIM + l * LINK_DIM;
        let c1 = tape.slice_cols(features, off, 3);
        let c2 = tape.slice_cols(features, off + 3, 3);
        let e1 = normalize_rows(tape, c1);
        let proj = dot_rows(tape, e1, c2);
        let along = tape.mul_col(e1, proj);
        let u2 = tape.sub(c2, along);
        let e2 = normalize_rows(tape, u2);
        let e3 = tape.cross(e1, e2);

        let a = pos[parents[l]];
        let unit_a = normalize_rows(tape, a);
        let towards = tape.scale(unit_a, -1.0);
        let mut rotated = None;
        for (k, e) in [e1, e2, e3].into_iter().enumerate() {
            let comp = tape.slice_cols(towards, k, 1);
            let term = tape.mul_col(e, comp);
            rotated = Some(match rotated {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        let step = tape.scale(rotated.unwrap(), d);
        pos.push(tape.add(a, step));
    }
    pos
}
