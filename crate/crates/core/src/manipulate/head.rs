use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::motion::{SampleMeta, Technique};

const MAGIC: &[u8; 4] = b"MDAH";
const VERSION: u32 = 1;
const MIN_STD: f64 = 1e-6;

pub const CLASSES: usize = Technique::ALL.len();

/// Per-dimension standardization of semantic embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZStats {
    pub fn fit(embeddings: &[Vec<f64>]) -> Result<Self> {
        let first = embeddings
            .first()
            .ok_or_else(|| Error::InvalidArgument("no embeddings".into()))?;
        let d = first.len();
        check_dims(embeddings, d)?;
        let n = embeddings.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| embeddings.iter().map(|z| z[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let var = embeddings.iter().map(|z| (z[j] - mean[j]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(MIN_STD)
            })
            .collect();
        Ok(ZStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

fn check_dims(embeddings: &[Vec<f64>], d: usize) -> Result<()> {
    match embeddings.iter().position(|z| z.len() != d) {
        Some(i) => Err(Error::Shape(format!(
            "embedding {i} has {} entries, expected {d}",
            embeddings[i].len()
        ))),
        None => Ok(()),
    }
}

/// Technique probabilities (in [`Technique::ALL`] order) and grade in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: [f64; CLASSES],
    pub grade: f64,
}

impl Prediction {
    pub fn technique(&self) -> Technique {
        let best = self
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        Technique::ALL[best]
    }
}

/// Linear technique classifier and grade regressor on standardized codes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeHead {
    pub technique_weights: [Vec<f64>; CLASSES],
    pub technique_bias: [f64; CLASSES],
    pub grade_weights: Vec<f64>,
    pub grade_bias: f64,
    pub z_stats: ZStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            iterations: 3000,
            learning_rate: 0.05,
            weight_decay: 1e-4,
        }
    }
}

fn softmax(logits: &[f64; CLASSES]) -> [f64; CLASSES] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.map(|l| (l - m).exp());
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl AttributeHead {
    /// All-zero weights over the given statistics.
    pub fn zeros(z_stats: ZStats) -> Self {
        let d = z_stats.dim();
        AttributeHead {
            technique_weights: std::array::from_fn(|_| vec![0.0; d]),
            technique_bias: [0.0; CLASSES],
            grade_weights: vec![0.0; d],
            grade_bias: 0.0,
            z_stats,
        }
    }

    pub fn dim(&self) -> usize {
        self.z_stats.dim()
    }

    /// Full-batch Adam on softmax cross-entropy plus squared grade error,
    /// starting from zero weights.
    pub fn train(embeddings: &[Vec<f64>], labels: &[SampleMeta], config: &HeadConfig) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let mut present = [false; CLASSES];
        labels.iter().for_each(|m| present[m.technique.index()] = true);
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::InvalidArgument("head training needs at least two technique classes".into()));
        }
        if config.iterations == 0 || !(config.learning_rate > 0.0) || !(config.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("head iterations and learning rate must be positive".into()));
        }
        let stats = ZStats::fit(embeddings)?;
        let d = stats.dim();
        let xs: Vec<Vec<f64>> = embeddings.iter().map(|z| stats.standardize(z)).collect();
        let n = xs.len() as f64;

        // Parameters flattened as [W (CLASSES×d), b (CLASSES), w_g (d), b_g].
        let width = CLASSES * d + CLASSES + d + 1;
        let mut theta = vec![0.0; width];
        let mut m = vec![0.0; width];
        let mut v = vec![0.0; width];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for it in 0..config.iterations {
            let mut grad = vec![0.0; width];
            let (w, rest) = theta.split_at(CLASSES * d);
            let (b, rest) = rest.split_at(CLASSES);
            let (wg, bg) = rest.split_at(d);
            for (x, meta) in xs.iter().zip(labels) {
                let logits: [f64; CLASSES] = std::array::from_fn(|c| dot(&w[c * d..(c + 1) * d], x) + b[c]);
                let p = softmax(&logits);
                for c in 0..CLASSES {
                    let e = (p[c] - f64::from(u8::from(c == meta.technique.index()))) / n;
                    for j in 0..d {
                        grad[c * d + j] += e * x[j];
                    }
                    grad[CLASSES * d + c] += e;
                }
                let r = 2.0 * (dot(wg, x) + bg[0] - meta.grade_value()) / n;
                let off = CLASSES * d + CLASSES;
                for j in 0..d {
                    grad[off + j] += r * x[j];
                }
                grad[width - 1] += r;
            }
            let t = (it + 1) as i32;
            let lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / config.iterations as f64).cos());
            for k in 0..width {
                let g = grad[k] + config.weight_decay * theta[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / (1.0 - b1.powi(t));
                let vh = v[k] / (1.0 - b2.powi(t));
                theta[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        let mut head = AttributeHead::zeros(stats);
        for c in 0..CLASSES {
            head.technique_weights[c].copy_from_slice(&theta[c * d..(c + 1) * d]);
            head.technique_bias[c] = theta[CLASSES * d + c];
        }
        head.grade_weights
            .copy_from_slice(&theta[CLASSES * d + CLASSES..width - 1]);
        head.grade_bias = theta[width - 1];
        head.check()?;
        Ok(head)
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        let finite = self
            .technique_weights
            .iter()
            .flatten()
            .chain(&self.technique_bias)
            .chain(&self.grade_weights)
            .chain([&self.grade_bias])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("head has non-finite weights".into()));
        }
        if self.technique_weights.iter().any(|w| w.len() != d) || self.grade_weights.len() != d {
            return Err(Error::Shape("head weights do not match the code dimension".into()));
        }
        if self.z_stats.std.len() != d || self.z_stats.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("code statistics need positive std per dimension".into()));
        }
        Ok(())
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!("code has {} entries, head expects {}", z.len(), self.dim())));
        }
        Ok(())
    }

    /// Prediction for a raw (unstandardized) code.
    pub fn predict(&self, z: &[f64]) -> Result<Prediction> {
        self.check_dim(z)?;
        Ok(self.predict_standardized(&self.z_stats.standardize(z)))
    }

    pub fn predict_standardized(&self, x: &[f64]) -> Prediction {
        let logits: [f64; CLASSES] = std::array::from_fn(|c| dot(&self.technique_weights[c], x) + self.technique_bias[c]);
        Prediction {
            probs: softmax(&logits),
            grade: (dot(&self.grade_weights, x) + self.grade_bias).clamp(0.0, 1.0),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = HeadHeader {
            d_z: self.dim(),
            classes: Technique::ALL.iter().map(|t| t.name().to_string()).collect(),
            z_stats: self.z_stats.clone(),
        };
        let mut w = Writer::new(MAGIC, VERSION);
        w.blob(&serde_json::to_vec(&header)?);
        for row in &self.technique_weights {
            w.f64s(row);
        }
        w.f64s(&self.technique_bias);
        w.f64s(&self.grade_weights);
        w.f64(self.grade_bias);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = read_file(path)?;
        let mut r = Reader::open(&buf, MAGIC, VERSION)?;
        let header: HeadHeader = serde_json::from_slice(r.blob()?)?;
        let expected: Vec<&str> = Technique::ALL.iter().map(|t| t.name()).collect();
        if header.classes != expected {
            return Err(Error::Corrupt(format!("unexpected class list {:?}", header.classes)));
        }
        let d = header.d_z;
        if header.z_stats.dim() != d || header.z_stats.std.len() != d {
            return Err(Error::Corrupt("code statistics do not match d_z".into()));
        }
        let mut head = AttributeHead::zeros(header.z_stats);
        for row in &mut head.technique_weights {
            *row = r.f64s(d)?;
        }
        head.technique_bias.copy_from_slice(&r.f64s(CLASSES)?);
        head.grade_weights = r.f64s(d)?;
        head.grade_bias = r.f64()?;
        r.finish()?;
        head.check().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(head)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadHeader {
    d_z: usize,
    classes: Vec<String>,
    z_stats: ZStats,
}
