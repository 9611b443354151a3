use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{tape_loss_foot, tape_loss_pos, tape_loss_simple, tape_loss_vel};
use super::model::{FeatureNorm, Model, Tensor};
use crate::autograd::{Tape, Var};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::motion::ContactMask;
use crate::pose::{PoseFeatures, SkeletonChain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pos_weight: f64,
    pub foot_weight: f64,
    pub vel_weight: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    pub beta2: f64,
    pub clip_norm: Option<f64>,
    pub warmup_steps: usize,
    /// Learning rate at the end of the cosine decay, relative to the peak.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pos_weight: 1.0,
            foot_weight: 1.0,
            vel_weight: 1.0,
            batch_size: 16,
            learning_rate: 1e-3,
            steps: 2000,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta2: 0.999,
            clip_norm: Some(1.0),
            warmup_steps: 50,
            final_lr_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let weights = [self.pos_weight, self.foot_weight, self.vel_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("learning rate must be ≥ 0 and decays in [0, 1)".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip norm must be positive".into()));
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let progress = if self.steps > 0 { (step as f64 / self.steps as f64).min(1.0) } else { 0.0 };
        let f = self.final_lr_fraction;
        let decay = f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * warm * decay
    }
}

/// Contact flags for chain markers, `(frames − 1) × feet`.
#[derive(Clone, Debug, PartialEq)]
pub struct FootContacts {
    /// Indices into the chain's marker order.
    pub feet: Vec<usize>,
    pub flags: Array2<f64>,
}

/// One training clip: standardized features plus what the geometric
/// losses need.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub x0: Array2<f64>,
    pub chain: SkeletonChain,
    pub contacts: Option<FootContacts>,
}

impl TrainSample {
    pub fn new(features: &PoseFeatures, contacts: Option<&ContactMask>, norm: &FeatureNorm) -> Result<Self> {
        let frames = features.frames();
        if frames < 2 {
            return Err(Error::Shape("training clips need at least 2 frames".into()));
        }
        let markers = features.chain().topology().markers();
        let contacts = contacts
            .map(|c| {
                if c.frames() != frames {
                    return Err(Error::Shape(format!("{} contact frames for {frames} feature frames", c.frames())));
                }
                let feet = c
                    .markers
                    .iter()
                    .map(|f| {
                        markers
                            .iter()
                            .position(|m| m == f)
                            .ok_or_else(|| Error::UnknownMarker(f.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let flags = Array2::from_shape_fn((frames - 1, feet.len()), |(i, k)| f64::from(u8::from(c.flags[i][k])));
                Ok(FootContacts { feet, flags })
            })
            .transpose()?;
        Ok(TrainSample {
            x0: norm.normalize(&features.to_matrix()),
            chain: features.chain().clone(),
            contacts,
        })
    }

    pub fn frames(&self) -> usize {
        self.x0.nrows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub simple: f64,
    pub pos: f64,
    pub foot: f64,
    pub vel: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += o.total * s;
        self.simple += o.simple * s;
        self.pos += o.pos * s;
        self.foot += o.foot * s;
        self.vel += o.vel * s;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.simple, self.pos, self.foot, self.vel].iter().all(|v| v.is_finite())
    }
}

/// Weighted loss terms for a prediction of one sample; `x0_hat` is standardized.
pub(crate) fn loss_terms(
    tape: &mut Tape,
    x0_hat: Var,
    sample: &TrainSample,
    norm: &FeatureNorm,
    config: &TrainConfig,
) -> (Var, [Var; 4]) {
    let x0 = tape.constant(sample.x0.clone());
    let simple = tape_loss_simple(tape, x0, x0_hat);
    let zero = tape.constant(Array2::zeros((1, 1)));
    let geometric = config.pos_weight > 0.0 || (config.foot_weight > 0.0 && sample.contacts.is_some());
    let (raw0, raw_hat) = if geometric {
        (norm.denormalize_on_tape(tape, x0), norm.denormalize_on_tape(tape, x0_hat))
    } else {
        (x0, x0_hat)
    };
    let pos = if config.pos_weight > 0.0 {
        tape_loss_pos(tape, raw0, raw_hat, &sample.chain)
    } else {
        zero
    };
    let foot = match &sample.contacts {
        Some(c) if config.foot_weight > 0.0 => tape_loss_foot(tape, raw_hat, &sample.chain, &c.feet, &c.flags),
        _ => zero,
    };
    let vel = if config.vel_weight > 0.0 {
        tape_loss_vel(tape, x0, x0_hat)
    } else {
        zero
    };
    let mut total = simple;
    for (term, w) in [(pos, config.pos_weight), (foot, config.foot_weight), (vel, config.vel_weight)] {
        if w > 0.0 {
            let s = tape.scale(term, w);
            total = tape.add(total, s);
        }
    }
    (total, [simple, pos, foot, vel])
}

struct Draw {
    t: usize,
    eps: Array2<f64>,
}

fn draws(batch: &[TrainSample], sched: &NoiseSchedule, seed: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .iter()
        .map(|s| Draw {
            t: rng.random_range(1..=sched.len()),
            eps: Array2::from_shape_simple_fn(s.x0.raw_dim(), || rng.sample(StandardNormal)),
        })
        .collect()
}

fn sample_loss(
    model: &Model,
    sample: &TrainSample,
    draw: &Draw,
    config: &TrainConfig,
    sched: &NoiseSchedule,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Array2<f64>>>)> {
    if sample.x0.ncols() != model.dims().feature_dim {
        return Err(Error::Shape(format!(
            "sample has {} features, model expects {}",
            sample.x0.ncols(),
            model.dims().feature_dim
        )));
    }
    if sample.frames() > model.dims().max_frames || sample.frames() < 2 {
        return Err(Error::Shape(format!(
            "sample has {} frames, model accepts 2..={}",
            sample.frames(),
            model.dims().max_frames
        )));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, with_grad);
    let x0 = tape.constant(sample.x0.clone());
    let z = model.encode_on_tape(&mut tape, &p, x0);
    let xt = tape.constant(q_sample(&sample.x0, draw.t, &draw.eps, sched)?);
    let hat = model.denoise_on_tape(&mut tape, &p, xt, draw.t, z);
    let (total, [simple, pos, foot, vel]) = loss_terms(&mut tape, hat, sample, model.norm(), config);
    let report = LossBreakdown {
        total: tape.scalar(total),
        simple: tape.scalar(simple),
        pos: tape.scalar(pos),
        foot: tape.scalar(foot),
        vel: tape.scalar(vel),
    };
    let grads = with_grad.then(|| {
        let g = tape.backward(total);
        p.iter()
            .zip(model.params())
            .map(|(v, t)| g.get_or_zeros(*v, t.value.dim()))
            .collect()
    });
    Ok((report, grads))
}

fn evaluate_batch(
    model: &Model,
    batch: &[TrainSample],
    config: &TrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Array2<f64>>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let draws = draws(batch, sched, seed);
    let per_sample = batch
        .par_iter()
        .zip(&draws)
        .map(|(s, d)| sample_loss(model, s, d, config, sched, with_grad))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grads: Option<Vec<Array2<f64>>> = None;
    for (l, g) in per_sample {
        loss.add_scaled(&l, w);
        if let Some(g) = g {
            match &mut grads {
                None => grads = Some(g.into_iter().map(|a| a * w).collect()),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        a.scaled_add(w, &b);
                    }
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Batch-mean loss with noise levels and noise drawn from `seed`.
pub fn loss_total(
    model: &Model,
    batch: &[TrainSample],
    config: &TrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LossBreakdown> {
    Ok(evaluate_batch(model, batch, config, sched, seed, false)?.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_parameter: String,
}

/// Compares reverse-mode gradients of [`loss_total`] against central
/// differences on `count` randomly chosen parameter scalars. The relative
/// error uses `max(|analytic|, |numeric|, 1e-6)` as its scale.
pub fn gradient_check(
    model: &Model,
    batch: &[TrainSample],
    config: &TrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
    count: usize,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = evaluate_batch(model, batch, config, sched, seed, true)?;
    let grads = grads.expect("gradients requested");
    let total: usize = model.params().iter().map(|t| t.value.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut worst = (0.0, String::new());
    for _ in 0..count {
        let mut k = rng.random_range(0..total);
        let ti = model
            .params()
            .iter()
            .position(|t| {
                if k < t.value.len() {
                    true
                } else {
                    k -= t.value.len();
                    false
                }
            })
            .unwrap();
        let value_at = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            let v = m.params_mut()[ti].value.as_slice_mut().expect("standard layout");
            v[k] += delta;
            Ok(loss_total(&m, batch, config, sched, seed)?.total)
        };
        let numeric = (value_at(h)? - value_at(-h)?) / (2.0 * h);
        let analytic = grads[ti].as_slice().expect("standard layout")[k];
        let scale = numeric.abs().max(analytic.abs()).max(1e-6);
        let err = (numeric - analytic).abs() / scale;
        if err >= worst.0 {
            worst = (err, format!("{}[{k}]", model.params()[ti].name));
        }
    }
    Ok(GradCheckReport {
        checked: count,
        max_rel_error: worst.0,
        worst_parameter: worst.1,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub learning_rate: f64,
    /// The loss was not finite and parameters were left unchanged.
    pub skipped: bool,
}

/// Owns a model and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    schedule: NoiseSchedule,
    step: usize,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.check()?;
        let zeros: Vec<Array2<f64>> = model.params().iter().map(|t| Array2::zeros(t.value.raw_dim())).collect();
        Ok(Trainer {
            model,
            config,
            schedule,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// Continues from saved optimizer moments at `step`.
    pub fn resume(
        model: Model,
        config: TrainConfig,
        schedule: NoiseSchedule,
        step: usize,
        moments: Vec<Tensor>,
    ) -> Result<Self> {
        let mut t = Trainer::new(model, config, schedule)?;
        t.step = step;
        let n = t.first.len();
        if moments.len() != 2 * n {
            return Err(Error::Shape(format!(
                "{} optimizer tensors for {n} parameters",
                moments.len()
            )));
        }
        for (i, m) in moments.into_iter().enumerate() {
            let slot = if i < n { &mut t.first[i] } else { &mut t.second[i - n] };
            if slot.dim() != m.value.dim() {
                return Err(Error::Shape(format!("optimizer tensor `{}` has the wrong shape", m.name)));
            }
            *slot = m.value;
        }
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> Vec<Tensor> {
        let names = self.model.params().iter().map(|t| t.name.clone());
        names
            .clone()
            .zip(&self.first)
            .map(|(n, v)| Tensor {
                name: format!("opt.first.{n}"),
                value: v.clone(),
            })
            .chain(names.zip(&self.second).map(|(n, v)| Tensor {
                name: format!("opt.second.{n}"),
                value: v.clone(),
            }))
            .collect()
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    /// Draws a batch from `data` and takes one optimizer step.
    pub fn step(&mut self, data: &[TrainSample]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let mut rng = self.step_rng();
        let batch: Vec<TrainSample> = if data.len() <= self.config.batch_size {
            data.to_vec()
        } else {
            (0..self.config.batch_size)
                .map(|_| data[rng.random_range(0..data.len())].clone())
                .collect()
        };
        let seed = rng.random();
        self.update(&batch, seed)
    }

    /// One optimizer step on exactly `batch`.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<StepReport> {
        let seed = self.step_rng().random();
        self.update(batch, seed)
    }

    fn update(&mut self, batch: &[TrainSample], seed: u64) -> Result<StepReport> {
        let (loss, grads) = evaluate_batch(&self.model, batch, &self.config, &self.schedule, seed, true)?;
        let mut grads = grads.expect("gradients requested");
        let lr = self.config.learning_rate_at(self.step);
        let grad_norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let report = |skipped| StepReport {
            step: self.step,
            loss,
            grad_norm,
            learning_rate: lr,
            skipped,
        };
        if !loss.is_finite() || !grad_norm.is_finite() {
            log::warn!(
                "step {}: non-finite loss {:?} (grad norm {grad_norm}); update skipped",
                self.step,
                loss
            );
            let r = report(true);
            self.step += 1;
            return Ok(r);
        }
        if let Some(c) = self.config.clip_norm {
            if grad_norm > c {
                for g in &mut grads {
                    *g *= c / grad_norm;
                }
            }
        }
        let r = report(false);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.momentum, self.config.beta2);
        let kind = self.config.optimizer;
        for (((param, g), m), v) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            match kind {
                OptimizerKind::SgdMomentum => {
                    *m *= b1;
                    *m += g;
                    param.value.scaled_add(-lr, m);
                }
                OptimizerKind::Adam => {
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    ndarray::Zip::from(&mut param.value)
                        .and(g)
                        .and(m)
                        .and(v)
                        .for_each(|p, &g, m, v| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                        });
                }
            }
        }
        Ok(r)
    }
}
