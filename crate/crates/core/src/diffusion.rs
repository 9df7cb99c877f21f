//! Gaussian diffusion: linear variance schedule, forward noising, the learned
//! reverse mean, and the deterministic DDIM sampler.
//!
//! Timesteps run `1..=T`; `t = 0` denotes clean data with `alpha_bar(0) = 1`.

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Parameters needed to rebuild a linear schedule; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Linear schedule from `beta_start` to `beta_end` over `t` steps.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let ok = 0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0;
    if !ok || (t > 1 && beta_start >= beta_end) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Schedule from explicit variances, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_index(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// One Markov step of the forward chain: `sqrt(1-beta_t) x + sqrt(beta_t) noise`.
pub fn forward_step(x_prev: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    check_same_shape(x_prev, noise, "forward_step noise")?;
    let beta = sched.beta(t)?;
    Ok(((x_prev * (1.0 - beta).sqrt())? + (noise * beta.sqrt())?)?)
}

/// Closed-form draw of `x_t` given `x_0`.
pub fn sample_xt(x0: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    check_same_shape(x0, noise, "sample_xt noise")?;
    let ab = sched.alpha_bar(t)?;
    Ok(((x0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

/// Reverse-process mean with a fixed variance.
pub fn posterior_mean(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, eps_hat, "posterior_mean eps")?;
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let scaled_eps = (eps_hat * (beta / (1.0 - ab).sqrt()))?;
    Ok(((x_t - scaled_eps)? * (1.0 / alpha.sqrt()))?)
}

/// Inverts [`sample_xt`] given a noise estimate.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, eps_hat, "predict_x0 eps")?;
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::InvalidArgument(format!("alpha_bar({t}) is zero")));
    }
    let scaled_eps = (eps_hat * (1.0 - ab).sqrt())?;
    Ok(((x_t - scaled_eps)? * (1.0 / ab.sqrt()))?)
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t || t > sched.len() {
        return Err(Error::InvalidArgument(format!(
            "DDIM step needs 0 <= t_prev < t <= {}, got t={t}, t_prev={t_prev}",
            sched.len()
        )));
    }
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    Ok(((x0 * ab_prev.sqrt())? + (eps_hat * (1.0 - ab_prev).sqrt())?)?)
}

/// Per-sample coefficient column `(N, 1, 1, 1)` in the dtype of `like`.
fn per_sample(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, (n, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// [`sample_xt`] with one timestep per batch element.
pub fn sample_xt_batch(x0: &Tensor, ts: &[usize], sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    check_same_shape(x0, noise, "sample_xt_batch noise")?;
    let abs = ts.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let signal = per_sample(abs.iter().map(|a| a.sqrt()).collect(), x0)?;
    let sigma = per_sample(abs.iter().map(|a| (1.0 - a).sqrt()).collect(), x0)?;
    Ok((x0.broadcast_mul(&signal)? + noise.broadcast_mul(&sigma)?)?)
}

/// [`predict_x0`] with one timestep per batch element.
pub fn predict_x0_batch(x_t: &Tensor, ts: &[usize], sched: &NoiseSchedule, eps_hat: &Tensor) -> Result<Tensor> {
    check_same_shape(x_t, eps_hat, "predict_x0_batch eps")?;
    let abs = ts.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let sigma = per_sample(abs.iter().map(|a| (1.0 - a).sqrt()).collect(), x_t)?;
    let inv = per_sample(abs.iter().map(|a| 1.0 / a.sqrt()).collect(), x_t)?;
    Ok((x_t - eps_hat.broadcast_mul(&sigma)?)?.broadcast_mul(&inv)?)
}

/// Standard-normal tensor drawn from a seeded generator.
pub fn gaussian_noise<R: Rng>(rng: &mut R, shape: impl Into<Shape>, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f32> = (0..shape.elem_count())
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Evenly spaced decreasing timesteps `t_1 > ... > t_steps`, starting at `T`.
/// Each one is paired with the next (or 0 after the last) in [`ddim_sample`].
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "DDIM steps must be in 1..={total}, got {steps}"
        )));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .map(|i| ((i as f64 * total as f64 / steps as f64).round() as usize).clamp(1, total))
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Anything that estimates the noise in `x_t` given spatial conditioning and a
/// brightness level.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Tensor, lambda: f64) -> Result<Tensor>;
}

/// Runs the DDIM chain from seeded Gaussian noise and clamps the result to `[0, 1]`.
///
/// `cond` is `(N, C, H, W)`; the output is `(N, 3, H, W)` in the same dtype.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    cond: &Tensor,
    lambda: f64,
    steps: usize,
    sched: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Tensor> {
    let x_t = initial_noise(cond, rng_seed)?;
    let x0 = ddim_loop(denoiser, x_t, cond, lambda, steps, sched)?;
    Ok(x0.clamp(0.0, 1.0)?)
}

pub(crate) fn initial_noise(cond: &Tensor, rng_seed: u64) -> Result<Tensor> {
    let (n, _, h, w) = cond.dims4()?;
    let mut rng = rng::seeded(rng_seed);
    gaussian_noise(&mut rng, (n, 3, h, w), cond.dtype(), cond.device())
}

/// The unclamped DDIM chain starting from `x_t` at `t = T`.
pub fn ddim_loop<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    mut x_t: Tensor,
    cond: &Tensor,
    lambda: f64,
    steps: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let ts = ddim_timesteps(sched.len(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = denoiser.predict(&x_t, t, cond, lambda)?;
        x_t = ddim_step(&x_t, t, t_prev, &eps, sched)?;
    }
    Ok(x_t)
}
