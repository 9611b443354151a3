//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse and accumulates gradients. The op set is exactly what
//! the transformer blocks, the losses and the differentiable skeleton
//! reconstruction need.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Gelu(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowSum(Var),
    ColMean(Var),
    Cross(Var, Var),
    SumAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn val(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).dot(&self.val(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).dot(&self.val(b).t());
        self.push(v, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.val(a) + &self.val(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.val(a) - &self.val(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.val(a) * &self.val(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.val(a) / &self.val(b);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.val(a) + &self.val(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.val(a) * &self.val(row);
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `n×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = &self.val(a) * &self.val(col);
        self.push(v, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.val(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = &self.val(a) + c;
        self.push(v, Op::Shift(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.val(a).to_owned();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with a `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.val(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        let v = &(&xhat * &self.val(gain)) + &self.val(bias);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.val(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, height: usize) -> Var {
        let v = self.val(a).slice(s![start..start + height, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// `n×m → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.val(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a), &[a])
    }

    /// `n×m → 1×m`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let v = self
            .val(a)
            .mean_axis(Axis(0))
            .expect("col_mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::ColMean(a), &[a])
    }

    /// Row-wise cross product of two `n×3` matrices.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        let v = cross_rows(self.val(a), self.val(b));
        self.push(v, Op::Cross(a, b), &[a, b])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.val(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of the `1×1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, d: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.val(*b).t()));
                acc(*b, self.val(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                acc(*a, g.dot(&self.val(*b)));
                acc(*b, g.t().dot(&self.val(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * &self.val(*b));
                acc(*b, g * &self.val(*a));
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                acc(*a, g / &bv);
                let mut d = g * &self.val(*a);
                Zip::from(&mut d).and(&bv).for_each(|d, &b| *d = -*d / (b * b));
                acc(*b, d);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                acc(*a, g * &self.val(*row));
                acc(*row, (g * &self.val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                acc(*a, g * &self.val(*col));
                acc(*col, (g * &self.val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&self.val(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                acc(*a, d);
            }
            Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 0.5 / y);
                acc(*a, d);
            }
            Op::Square(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&self.val(*a)).for_each(|d, &x| *d *= 2.0 * x);
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                Zip::from(d.rows_mut())
                    .and(y.rows())
                    .and(&dots)
                    .for_each(|mut dr, yr, &dot| dr.scaled_add(-dot, &yr));
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                acc(*gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * &self.val(*gain);
                let n = dxhat.ncols() as f64;
                let mut dx = Array2::zeros(dxhat.raw_dim());
                for (r, ((mut out, dh), xh)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(dxhat.rows())
                    .zip(xhat.rows())
                    .enumerate()
                {
                    let sum_dh = dh.sum();
                    let sum_dh_xh = dh.dot(&xh);
                    let inv = inv_std[r];
                    Zip::from(&mut out)
                        .and(&dh)
                        .and(&xh)
                        .for_each(|o, &d, &h| *o = inv / n * (n * d - sum_dh - h * sum_dh_xh));
                }
                acc(*x, dx);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.nodes[a.0].value.raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.nodes[a.0].value.raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.nodes[p.0].value.nrows();
                    acc(p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    acc(p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::RowSum(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                acc(*a, g.broadcast(shape).unwrap().to_owned());
            }
            Op::ColMean(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                let n = shape[0] as f64;
                acc(*a, g.broadcast(shape).unwrap().mapv(|v| v / n));
            }
            Op::Cross(a, b) => {
                acc(*a, cross_rows(self.val(*b), g.view()));
                acc(*b, cross_rows(g.view(), self.val(*a)));
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                acc(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
        }
    }
}

fn cross_rows(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(a.raw_dim());
    Zip::from(out.rows_mut())
        .and(a.rows())
        .and(b.rows())
        .for_each(|mut o, x, y| {
            o[0] = x[1] * y[2] - x[2] * y[1];
            o[1] = x[2] * y[0] - x[0] * y[2];
            o[2] = x[0] * y[1] - x[1] * y[0];
        });
    out
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(inputs).
    fn check(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |ins: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let out = build(&mut t, &vars);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[k], x.dim());
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g[[r, c]];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} [{r},{c}]: analytic {an} vs numeric {fd}");
            }
        }
    }

    /// Weighted sum so every output entry matters.
    fn reduce(t: &mut Tape, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = t.value(v).dim();
        let w = t.constant(random(&mut rng, r, c));
        let m = t.mul(v, w);
        t.sum_all(m)
    }

    #[test]
    fn matmul_and_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2)],
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                let m = t.add_row(m, v[2]);
                let m = t.mul_row(m, v[2]);
                reduce(t, m, 9)
            },
        );
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 5, 4)], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            reduce(t, m, 3)
        });
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos = random(&mut rng, 3, 3).mapv(|x| x.abs() + 0.5);
        check(vec![random(&mut rng, 3, 3), pos.clone()], |t, v| {
            let a = t.div(v[0], v[1]);
            let b = t.sqrt(v[1]);
            let c = t.mul(a, b);
            let d = t.gelu(c);
            let e = t.square(d);
            let f = t.sub(e, v[0]);
            let f = t.shift(f, 0.3);
            let f = t.scale(f, -1.7);
            reduce(t, f, 4)
        });
    }

    #[test]
    fn softmax_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![random(&mut rng, 4, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5)],
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let l = t.layer_norm(s, v[1], v[2]);
                reduce(t, l, 5)
            },
        );
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![random(&mut rng, 4, 6), random(&mut rng, 4, 3), random(&mut rng, 4, 1)],
            |t, v| {
                let a = t.slice_cols(v[0], 1, 3);
                let b = t.cross(a, v[1]);
                let c = t.mul_col(b, v[2]);
                let d = t.concat_cols(&[c, v[1]]);
                let e = t.slice_rows(d, 1, 2);
                let f = t.concat_rows(&[e, d]);
                let g = t.row_sum(f);
                let h = t.col_mean(f);
                let g = reduce(t, g, 6);
                let h = reduce(t, h, 7);
                t.add(g, h)
            },
        );
    }

    #[test]
    fn mean_all_and_constants() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let c = t.constant(array![[1.0, 1.0], [1.0, 1.0]]);
        let d = t.mul(a, c);
        let m = t.mean_all(d);
        assert_eq!(t.scalar(m), 2.5);
        let g = t.backward(m);
        assert_eq!(g.get(a).unwrap(), &array![[0.25, 0.25], [0.25, 0.25]]);
        assert!(g.get(c).is_none());
    }
}
