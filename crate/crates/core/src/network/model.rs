use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Width of one frame of pose features.
    pub feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Transformer blocks in each of the encoder and the denoiser.
    pub layers: usize,
    pub d_ff: usize,
    pub d_z: usize,
    pub max_frames: usize,
}

impl Dims {
    pub fn new(feature_dim: usize) -> Self {
        Dims {
            feature_dim,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            d_z: 32,
            max_frames: 100,
        }
    }

    fn check(&self) -> Result<()> {
        if self.feature_dim == 0 || self.d_model == 0 || self.d_z == 0 || self.max_frames == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-column affine standardization of pose features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub const MIN_STD: f64 = 1e-3;

    pub fn identity(dim: usize) -> Self {
        FeatureNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over every frame of every sample.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut rows = 0usize;
        let mut sum: Option<ndarray::Array1<f64>> = None;
        let mut sq: Option<ndarray::Array1<f64>> = None;
        for s in samples {
            rows += s.nrows();
            let (a, b) = (s.sum_axis(Axis(0)), s.mapv(|v| v * v).sum_axis(Axis(0)));
            match (&mut sum, &mut sq) {
                (Some(x), Some(y)) if x.len() == a.len() => {
                    *x += &a;
                    *y += &b;
                }
                (None, None) => {
                    sum = Some(a);
                    sq = Some(b);
                }
                _ => return Err(Error::Shape("samples have differing feature widths".into())),
            }
        }
        let (Some(sum), Some(sq)) = (sum, sq) else {
            return Err(Error::InvalidArgument("no samples to fit normalization".into()));
        };
        if rows == 0 {
            return Err(Error::InvalidArgument("no frames to fit normalization".into()));
        }
        let n = rows as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(Self::MIN_STD))
            .collect();
        Ok(FeatureNorm { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }

    pub(crate) fn denormalize_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let std = tape.constant(Array2::from_shape_vec((1, self.dim()), self.std.clone()).unwrap());
        let mean = tape.constant(Array2::from_shape_vec((1, self.dim()), self.mean.clone()).unwrap());
        let scaled = tape.mul_row(x, std);
        tape.add_row(scaled, mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (usize, usize),
    qkv: (usize, usize),
    out: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    enc_in: (usize, usize),
    enc_blocks: Vec<Block>,
    enc_ln: (usize, usize),
    enc_head: (usize, usize),
    den_in: (usize, usize),
    den_time: (usize, usize),
    den_code: (usize, usize),
    den_blocks: Vec<Block>,
    den_ln: (usize, usize),
    den_out: (usize, usize),
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: &str, shape: (usize, usize), init: Init) -> usize {
        let value = match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Array2::from_shape_simple_fn(shape, || dist.sample(&mut self.rng))
            }
        };
        self.tensors.push(Tensor {
            name: name.to_string(),
            value,
        });
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> (usize, usize) {
        let w = self.add(&format!("{name}.w"), (fan_in, fan_out), Init::Normal(gain / (fan_in as f64).sqrt()));
        let b = self.add(&format!("{name}.b"), (1, fan_out), Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        let g = self.add(&format!("{name}.gain"), (1, d), Init::Ones);
        let b = self.add(&format!("{name}.bias"), (1, d), Init::Zeros);
        (g, b)
    }

    fn block(&mut self, name: &str, dims: &Dims) -> Block {
        let d = dims.d_model;
        let residual = 1.0 / (2.0 * dims.layers as f64).sqrt();
        Block {
            ln1: self.norm(&format!("{name}.ln1"), d),
            qkv: self.linear(&format!("{name}.qkv"), d, 3 * d, 1.0),
            out: self.linear(&format!("{name}.attn_out"), d, d, residual),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, dims.d_ff, 1.0),
            ff2: self.linear(&format!("{name}.ff2"), dims.d_ff, d, residual),
        }
    }
}

fn build(dims: &Dims, seed: u64) -> (Layout, Vec<Tensor>) {
    let mut b = Builder {
        tensors: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = dims.d_model;
    let layout = Layout {
        enc_in: b.linear("encoder.input", dims.feature_dim, d, 1.0),
        enc_blocks: (0..dims.layers).map(|i| b.block(&format!("encoder.block{i}"), dims)).collect(),
        enc_ln: b.norm("encoder.final_norm", d),
        enc_head: b.linear("encoder.head", d, dims.d_z, 1.0),
        den_in: b.linear("denoiser.input", dims.feature_dim, d, 1.0),
        den_time: b.linear("denoiser.time", d, d, 1.0),
        den_code: b.linear("denoiser.code", dims.d_z, d, 1.0),
        den_blocks: (0..dims.layers).map(|i| b.block(&format!("denoiser.block{i}"), dims)).collect(),
        den_ln: b.norm("denoiser.final_norm", d),
        den_out: b.linear("denoiser.output", d, dims.feature_dim, 1.0),
    };
    (layout, b.tensors)
}

/// Sinusoidal embedding of a scalar position, `1 × dim`.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((1, dim), |(_, i)| {
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        if i % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Encoder `f_ψ` and denoiser `m_θ` with their feature standardization.
#[derive(Clone, Debug)]
pub struct Model {
    dims: Dims,
    norm: FeatureNorm,
    layout: Layout,
    params: Vec<Tensor>,
    positions: Array2<f64>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.norm == other.norm && self.params == other.params
    }
}

impl Model {
    pub fn new(dims: Dims, norm: FeatureNorm, seed: u64) -> Result<Self> {
        dims.check()?;
        if norm.dim() != dims.feature_dim {
            return Err(Error::Shape(format!(
                "normalization has width {}, model expects {}",
                norm.dim(),
                dims.feature_dim
            )));
        }
        let (layout, params) = build(&dims, seed);
        let positions = ndarray::concatenate(
            Axis(0),
            &(0..dims.max_frames)
                .map(|p| sinusoidal_embedding(p as f64, dims.d_model))
                .collect::<Vec<_>>()
                .iter()
                .map(|a| a.view())
                .collect::<Vec<_>>(),
        )
        .expect("uniform widths");
        Ok(Model {
            dims,
            norm,
            layout,
            params,
            positions,
        })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_tensors(dims: Dims, norm: FeatureNorm, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = Model::new(dims, norm, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "{} tensors supplied, architecture has {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (slot, t) in model.params.iter_mut().zip(tensors) {
            if slot.name != t.name || slot.value.dim() != t.value.dim() {
                return Err(Error::Shape(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    t.name,
                    t.value.dim(),
                    slot.name,
                    slot.value.dim()
                )));
            }
            if t.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt(format!("tensor `{}` has non-finite values", t.name)));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn norm(&self) -> &FeatureNorm {
        &self.norm
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|t| t.value.len()).sum()
    }

    /// Puts every parameter on the tape, as leaves when gradients are wanted.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.value.clone())
                } else {
                    tape.constant(t.value.clone())
                }
            })
            .collect()
    }

    fn check_frames(&self, x: &Array2<f64>, valid: usize) -> Result<()> {
        if x.ncols() != self.dims.feature_dim {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.dims.feature_dim
            )));
        }
        if valid == 0 || valid > x.nrows() {
            return Err(Error::Shape(format!("{valid} valid frames in a {}-frame input", x.nrows())));
        }
        if valid > self.dims.max_frames {
            return Err(Error::Shape(format!(
                "{valid} frames exceed the model limit of {}",
                self.dims.max_frames
            )));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, p: &[Var], (w, b): (usize, usize), x: Var) -> Var {
        let y = tape.matmul(x, p[w]);
        tape.add_row(y, p[b])
    }

    fn block(&self, tape: &mut Tape, p: &[Var], blk: &Block, h: Var) -> Var {
        let d = self.dims.d_model;
        let dh = d / self.dims.heads;
        let x = tape.layer_norm(h, p[blk.ln1.0], p[blk.ln1.1]);
        let qkv = self.linear(tape, p, blk.qkv, x);
        let heads: Vec<Var> = (0..self.dims.heads)
            .map(|k| {
                let q = tape.slice_cols(qkv, k * dh, dh);
                let kk = tape.slice_cols(qkv, d + k * dh, dh);
                let v = tape.slice_cols(qkv, 2 * d + k * dh, dh);
                let scores = tape.matmul_nt(q, kk);
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let att = tape.softmax_rows(scores);
                tape.matmul(att, v)
            })
            .collect();
        let cat = tape.concat_cols(&heads);
        let proj = self.linear(tape, p, blk.out, cat);
        let h = tape.add(h, proj);
        let x = tape.layer_norm(h, p[blk.ln2.0], p[blk.ln2.1]);
        let f = self.linear(tape, p, blk.ff1, x);
        let f = tape.gelu(f);
        let f = self.linear(tape, p, blk.ff2, f);
        tape.add(h, f)
    }

    fn frame_tokens(&self, tape: &mut Tape, p: &[Var], proj: (usize, usize), x: Var) -> Var {
        let n = tape.value(x).nrows();
        let h = self.linear(tape, p, proj, x);
        let pe = tape.constant(self.positions.slice(ndarray::s![..n, ..]).to_owned());
        tape.add(h, pe)
    }

    /// `f_ψ` on standardized frames (all rows valid): `1 × d_z`.
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &[Var], x0: Var) -> Var {
        let l = &self.layout;
        let mut h = self.frame_tokens(tape, p, l.enc_in, x0);
        for blk in &l.enc_blocks {
            h = self.block(tape, p, blk, h);
        }
        let h = tape.layer_norm(h, p[l.enc_ln.0], p[l.enc_ln.1]);
        let pooled = tape.col_mean(h);
        self.linear(tape, p, l.enc_head, pooled)
    }

    /// `m_θ` on a standardized noisy sequence: same shape as `x_t`.
    pub fn denoise_on_tape(&self, tape: &mut Tape, p: &[Var], x_t: Var, t: usize, z: Var) -> Var {
        let l = &self.layout;
        let n = tape.value(x_t).nrows();
        let temb = tape.constant(sinusoidal_embedding(t as f64, self.dims.d_model));
        let time_tok = self.linear(tape, p, l.den_time, temb);
        let code_tok = self.linear(tape, p, l.den_code, z);
        let frames = self.frame_tokens(tape, p, l.den_in, x_t);
        let mut h = tape.concat_rows(&[time_tok, code_tok, frames]);
        for blk in &l.den_blocks {
            h = self.block(tape, p, blk, h);
        }
        let h = tape.layer_norm(h, p[l.den_ln.0], p[l.den_ln.1]);
        let h = tape.slice_rows(h, 2, n);
        self.linear(tape, p, l.den_out, h)
    }

    /// Semantic code of the first `valid` frames of a standardized sequence;
    /// rows beyond `valid` are padding and never read.
    pub fn semantic_encode(&self, x0: &Array2<f64>, valid: usize) -> Result<Vec<f64>> {
        self.check_frames(x0, valid)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(x0.slice(ndarray::s![..valid, ..]).to_owned());
        let z = self.encode_on_tape(&mut tape, &p, x);
        Ok(tape.value(z).iter().copied().collect())
    }

    /// `x̂_0` for a standardized noisy sequence at step `t`.
    pub fn denoise(&self, x_t: &Array2<f64>, t: usize, z: &[f64]) -> Result<Array2<f64>> {
        self.check_frames(x_t, x_t.nrows())?;
        if z.len() != self.dims.d_z {
            return Err(Error::Shape(format!("code has {} entries, model expects {}", z.len(), self.dims.d_z)));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let zv = tape.constant(Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap());
        let out = self.denoise_on_tape(&mut tape, &p, x, t, zv);
        Ok(tape.value(out).clone())
    }
}

impl Denoiser for Model {
    fn denoise(&self, x_t: &Array2<f64>, t: usize, z: &[f64]) -> Result<Array2<f64>> {
        Model::denoise(self, x_t, t, z)
    }
}
