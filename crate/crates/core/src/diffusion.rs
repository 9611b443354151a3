//! Noise schedules, forward noising and strided DDIM-style sampling
//! conditioned on a semantic code.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown schedule `{s}`"))),
        }
    }
}

/// Cumulative signal coefficients `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidConfig(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let n = steps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| ((t / n + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / n;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                (0..steps)
                    .map(|i| (lo + (hi - lo) * i as f64 / (n - 1.0)).min(MAX_BETA))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in betas {
            let last = *alpha_bar.last().unwrap();
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(NoiseSchedule { kind, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `T`.
    pub fn len(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("step {t} outside 0..={}", self.len()))
        })
    }

    /// `τ_i = round(i·T/S)` for `i = 1..=S`, ascending.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::InvalidArgument(format!(
                "substep count {steps} outside 1..={}",
                self.len()
            )));
        }
        Ok((1..=steps)
            .map(|i| ((i * self.len()) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Array2<f64>, t: usize, eps: &Array2<f64>, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    same_shape(x0, eps, "q_sample")?;
    mix(x0, eps, sched.alpha_bar(t)?)
}

fn mix(x0: &Array2<f64>, eps: &Array2<f64>, ab: f64) -> Result<Array2<f64>> {
    let (a, b) = (ab.sqrt(), (1.0 - ab).max(0.0).sqrt());
    Ok(x0 * a + eps * b)
}

/// Noise implied by a state and a clean estimate at step `t`.
pub fn eps_from_x0(x_t: &Array2<f64>, x0_hat: &Array2<f64>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    same_shape(x_t, x0_hat, "eps_from_x0")?;
    implied_eps(x_t, x0_hat, sched.alpha_bar(t)?)
}

fn implied_eps(x_t: &Array2<f64>, x0_hat: &Array2<f64>, ab: f64) -> Result<Array2<f64>> {
    if ab >= 1.0 {
        return Err(Error::Degenerate("noise is undefined where ᾱ = 1".into()));
    }
    Ok((x_t - &(x0_hat * ab.sqrt())) / (1.0 - ab).sqrt())
}

/// Predicts the clean sample from a noisy one at step `t` given a code.
pub trait Denoiser {
    fn denoise(&self, x_t: &Array2<f64>, t: usize, z: &[f64]) -> Result<Array2<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(&Array2<f64>, usize, &[f64]) -> Array2<f64>,
{
    fn denoise(&self, x_t: &Array2<f64>, t: usize, z: &[f64]) -> Result<Array2<f64>> {
        Ok(self(x_t, t, z))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplingMode {
    /// Reuses the implied noise (η = 0); invertible.
    #[default]
    Deterministic,
    /// Draws fresh standard normal noise each step from a seeded stream.
    Stochastic { seed: u64 },
}

struct NoiseSource(Option<ChaCha8Rng>);

impl NoiseSource {
    fn new(mode: SamplingMode) -> Self {
        NoiseSource(match mode {
            SamplingMode::Deterministic => None,
            SamplingMode::Stochastic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        })
    }
}

fn denoise_checked(den: &dyn Denoiser, x_t: &Array2<f64>, t: usize, z: &[f64]) -> Result<Array2<f64>> {
    let x0 = den.denoise(x_t, t, z)?;
    same_shape(x_t, &x0, "denoiser output")?;
    Ok(x0)
}

fn step_to(
    x_t: &Array2<f64>,
    t: usize,
    t_prev: usize,
    z: &[f64],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    noise: &mut NoiseSource,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if t == 0 || t > sched.len() || t_prev >= t {
        return Err(Error::InvalidArgument(format!("reverse step {t} -> {t_prev} outside 1..={}", sched.len())));
    }
    let x0 = denoise_checked(den, x_t, t, z)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let eps = match &mut noise.0 {
        Some(rng) => Array2::from_shape_simple_fn(x_t.raw_dim(), || StandardNormal.sample(rng)),
        None => implied_eps(x_t, &x0, sched.alpha_bar(t)?)?,
    };
    Ok((mix(&x0, &eps, ab_prev)?, x0))
}

/// One reverse step from `t` to `t − 1`.
pub fn reverse_step(
    x_t: &Array2<f64>,
    t: usize,
    z: &[f64],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    mode: SamplingMode,
) -> Result<Array2<f64>> {
    reverse_step_to(x_t, t, t.wrapping_sub(1), z, den, sched, mode)
}

/// One reverse step from `t` to an earlier step `t_prev`.
pub fn reverse_step_to(
    x_t: &Array2<f64>,
    t: usize,
    t_prev: usize,
    z: &[f64],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    mode: SamplingMode,
) -> Result<Array2<f64>> {
    Ok(step_to(x_t, t, t_prev, z, den, sched, &mut NoiseSource::new(mode))?.0)
}

/// Deterministic inversion step from `t` to a later step `t_next`.
pub fn inversion_step(
    x_t: &Array2<f64>,
    t: usize,
    t_next: usize,
    z: &[f64],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t == 0 || t_next <= t || t_next > sched.len() {
        return Err(Error::InvalidArgument(format!("inversion step {t} -> {t_next} outside 1..={}", sched.len())));
    }
    let x0 = denoise_checked(den, x_t, t, z)?;
    let eps = implied_eps(x_t, &x0, sched.alpha_bar(t)?)?;
    mix(&x0, &eps, sched.alpha_bar(t_next)?)
}

/// Runs the reverse chain over `steps` strided timesteps from `τ_S` and
/// returns the final clean estimate.
pub fn decode(
    x_top: &Array2<f64>,
    z: &[f64],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    mode: SamplingMode,
) -> Result<Array2<f64>> {
    let taus = sched.timesteps(steps)?;
    let mut noise = NoiseSource::new(mode);
    let mut x = x_top.clone();
    for i in (0..taus.len()).rev() {
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let (next, x0) = step_to(&x, taus[i], prev, z, den, sched, &mut noise)?;
        if i == 0 {
            return Ok(x0);
        }
        x = next;
    }
    unreachable!("timesteps is non-empty")
}

/// Noisy state at `τ_S` recovered by deterministic inversion, tagged with
/// the substep count it is only valid for.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticCode {
    pub x_t: Array2<f64>,
    pub steps: usize,
}

/// Deterministic inversion of [`decode`]: the clean sample stands in for the
/// state at `τ_1` and is carried up to `τ_S`.
pub fn stochastic_encode(
    x0: &Array2<f64>,
    z: &[f64],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<StochasticCode> {
    let taus = sched.timesteps(steps)?;
    let mut x = x0.clone();
    for w in taus.windows(2) {
        x = inversion_step(&x, w[0], w[1], z, den, sched)?;
    }
    Ok(StochasticCode { x_t: x, steps })
}

/// Deterministic decode of a stochastic code; `steps` must match the encode.
pub fn decode_code(
    code: &StochasticCode,
    z: &[f64],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Array2<f64>> {
    if code.steps != steps {
        return Err(Error::InvalidArgument(format!(
            "code was encoded with {} substeps, decode requested {steps}",
            code.steps
        )));
    }
    decode(&code.x_t, z, den, sched, steps, SamplingMode::Deterministic)
}

/// Fresh `N(0, 1)` state for unconditional sampling.
pub fn prior_sample(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}
