//! Training objectives. Every image-space term takes `(N, 3, H, W)` tensors and
//! returns a differentiable scalar; the composite combines them with fixed
//! weights and switches the color and brightness terms on at a given epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::gaussian_kernel_1d;
use crate::ops::{atan2, luma, safe_sqrt};
use crate::perceptual::FeatureExtractor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Pixels whose RGB vector is shorter than this are ignored by the color term.
pub const COLOR_MIN_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Simple,
    Lpips,
    Ssim,
    Mse,
    Brightness,
    Color,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Simple,
        LossTerm::Lpips,
        LossTerm::Ssim,
        LossTerm::Mse,
        LossTerm::Brightness,
        LossTerm::Color,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Simple => "simple",
            LossTerm::Lpips => "lpips",
            LossTerm::Ssim => "ssim",
            LossTerm::Mse => "mse",
            LossTerm::Brightness => "brightness",
            LossTerm::Color => "color",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lpips: f64,
    pub ssim: f64,
    pub mse: f64,
    pub brightness: f64,
    pub color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lpips: 30.0,
            ssim: 2.83,
            mse: 1.0,
            brightness: 20.0,
            color: 100.0,
        }
    }
}

impl LossWeights {
    /// Weight of a term; the noise-prediction term is always 1.
    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Simple => 1.0,
            LossTerm::Lpips => self.lpips,
            LossTerm::Ssim => self.ssim,
            LossTerm::Mse => self.mse,
            LossTerm::Brightness => self.brightness,
            LossTerm::Color => self.color,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lpips, self.ssim, self.mse, self.brightness, self.color];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Image-space terms active at `epoch`.
pub fn active_terms(epoch: usize, stage_switch_epoch: usize) -> BTreeSet<LossTerm> {
    let mut set: BTreeSet<LossTerm> = [LossTerm::Lpips, LossTerm::Ssim, LossTerm::Mse].into();
    if epoch >= stage_switch_epoch {
        set.insert(LossTerm::Brightness);
        set.insert(LossTerm::Color);
    }
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_term: BTreeMap<LossTerm, f64>,
    pub active_terms: BTreeSet<LossTerm>,
}

impl LossReport {
    /// Builds a report from already-evaluated term values; only active terms count.
    pub fn from_terms(per_term: BTreeMap<LossTerm, f64>, active_terms: BTreeSet<LossTerm>, weights: &LossWeights) -> Self {
        let total = active_terms
            .iter()
            .map(|t| weights.weight(*t) * per_term.get(t).copied().unwrap_or(0.0))
            .sum();
        Self {
            total,
            per_term,
            active_terms,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.per_term.values().all(|v| v.is_finite())
    }
}

fn check_pair(pred: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

fn check_rgb(x: &Tensor, what: &str) -> Result<()> {
    match x.dims() {
        [_, 3, _, _] => Ok(()),
        d => Err(Error::ShapeMismatch(format!("{what}: expected (N, 3, H, W), got {d:?}"))),
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean squared error between true and predicted noise.
pub fn simple_loss(eps_true: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    check_pair(eps_true, eps_hat, "simple_loss")?;
    Ok((eps_hat - eps_true)?.sqr()?.mean_all()?)
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair(pred, target, "mse_loss")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean absolute difference of BT.601 luma.
pub fn brightness_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair(pred, target, "brightness_loss")?;
    check_rgb(pred, "brightness_loss")?;
    Ok((luma(pred)? - luma(target)?)?.abs()?.mean_all()?)
}

/// Mean per-pixel angle between RGB vectors, computed as
/// `atan2(|p x q|, p . q)`; near-zero vectors contribute 0.
pub fn color_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair(pred, target, "color_loss")?;
    check_rgb(pred, "color_loss")?;
    let ch = |x: &Tensor, i: usize| x.narrow(1, i, 1);
    let (p0, p1, p2) = (ch(pred, 0)?, ch(pred, 1)?, ch(pred, 2)?);
    let (q0, q1, q2) = (ch(target, 0)?, ch(target, 1)?, ch(target, 2)?);
    let c0 = ((&p1 * &q2)? - (&p2 * &q1)?)?;
    let c1 = ((&p2 * &q0)? - (&p0 * &q2)?)?;
    let c2 = ((&p0 * &q1)? - (&p1 * &q0)?)?;
    let cross = safe_sqrt(&((c0.sqr()? + c1.sqr()?)? + c2.sqr()?)?)?;
    let dot = (pred * target)?.sum_keepdim(1)?;
    let angle = atan2(&cross, &dot)?;

    let min_sq = COLOR_MIN_NORM * COLOR_MIN_NORM;
    let valid = pred
        .sqr()?
        .sum_keepdim(1)?
        .ge(min_sq)?
        .mul(&target.sqr()?.sum_keepdim(1)?.ge(min_sq)?)?;
    let angle = valid.where_cond(&angle, &angle.zeros_like()?)?;
    Ok(angle.mean_all()?)
}

fn gaussian_window(channels: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let g = gaussian_kernel_1d(SSIM_WINDOW, SSIM_SIGMA);
    let mut w2 = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w2.push(a * b);
        }
    }
    let w = Tensor::from_vec(w2, (1, 1, SSIM_WINDOW, SSIM_WINDOW), device)?
        .to_dtype(dtype)?
        .repeat((channels, 1, 1, 1))?;
    Ok(w)
}

/// Per-sample mean SSIM over channels and valid window positions, `(N,)`.
pub fn ssim_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b, "ssim")?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let win = gaussian_window(c, a.dtype(), a.device())?;
    let filt = |x: &Tensor| x.conv2d(&win, 0, 1, 1, c);
    let mu_a = filt(a)?;
    let mu_b = filt(b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (filt(&a.sqr()?)? - &mu_aa)?;
    let var_b = (filt(&b.sqr()?)? - &mu_bb)?;
    let cov = (filt(&(a * b)?)? - &mu_ab)?;

    let num = ((&mu_ab * 2.0)?.affine(1.0, SSIM_C1)? * (&cov * 2.0)?.affine(1.0, SSIM_C2)?)?;
    let den = ((&mu_aa + &mu_bb)?.affine(1.0, SSIM_C1)? * (&var_a + &var_b)?.affine(1.0, SSIM_C2)?)?;
    let map = (num / den)?;
    Ok(map.reshape((n, ()))?.mean(1)?)
}

/// Batch-mean SSIM similarity.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(ssim_per_sample(a, b)?.mean_all()?)
}

/// `1 - SSIM`.
pub fn ssim_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(ssim(pred, target)?.affine(-1.0, 1.0)?)
}

/// Sum over extractor stages of the spatially averaged squared distance
/// between channel-normalized activations.
pub fn lpips_loss(pred: &Tensor, target: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    check_pair(pred, target, "lpips_loss")?;
    check_rgb(pred, "lpips_loss")?;
    let n = pred.dim(0)?;
    let both = Tensor::cat(&[pred, target], 0)?;
    let mut total: Option<Tensor> = None;
    for f in extractor.features(&both)? {
        let norm = safe_sqrt(&f.sqr()?.sum_keepdim(1)?)?.affine(1.0, 1e-10)?;
        let f = f.broadcast_div(&norm)?;
        let d = (f.narrow(0, 0, n)? - f.narrow(0, n, n)?)?
            .sqr()?
            .sum_keepdim(1)?
            .mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok(total.expect("extractor has stages"))
}

pub fn term_loss(term: LossTerm, pred: &Tensor, target: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    match term {
        LossTerm::Simple => simple_loss(target, pred),
        LossTerm::Lpips => lpips_loss(pred, target, extractor),
        LossTerm::Ssim => ssim_loss(pred, target),
        LossTerm::Mse => mse_loss(pred, target),
        LossTerm::Brightness => brightness_loss(pred, target),
        LossTerm::Color => color_loss(pred, target),
    }
}

/// Differentiable total together with its scalar breakdown.
#[derive(Debug)]
pub struct CompositeLoss {
    pub total: Tensor,
    pub report: LossReport,
}

/// Weighted sum of the image-space terms active at `epoch`, evaluated on the
/// predicted clean image against the reference.
pub fn composite_loss(
    x0_hat: &Tensor,
    reference: &Tensor,
    epoch: usize,
    stage_switch_epoch: usize,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
) -> Result<CompositeLoss> {
    check_pair(x0_hat, reference, "composite_loss")?;
    let active = active_terms(epoch, stage_switch_epoch);
    let mut per_term = BTreeMap::new();
    let mut total: Option<Tensor> = None;
    for &term in &active {
        let value = term_loss(term, x0_hat, reference, extractor)?;
        per_term.insert(term, scalar(&value)?);
        let weighted = (value * weights.weight(term))?;
        total = Some(match total {
            Some(t) => (t + weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("at least three terms are always active");
    let report = LossReport::from_terms(per_term, active, weights);
    Ok(CompositeLoss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_noise;
    use crate::rng;
    use candle_core::Device;

    fn rand_img(seed: u64, shape: (usize, usize, usize, usize)) -> Tensor {
        let mut r = rng::seeded(seed);
        let t = gaussian_noise(&mut r, shape, DType::F64, &Device::Cpu).unwrap();
        (t * 0.2).unwrap().affine(1.0, 0.5).unwrap().clamp(0.0, 1.0).unwrap()
    }

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::random_alexnet(0, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn simple_loss_examples() {
        let z = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let o = z.ones_like().unwrap();
        assert_eq!(scalar(&simple_loss(&z, &o).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&simple_loss(&o, &o).unwrap()).unwrap(), 0.0);
        let bad = Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(simple_loss(&z, &bad).is_err());
    }

    #[test]
    fn brightness_offset() {
        let a = rand_img(1, (1, 3, 8, 8)).affine(0.5, 0.0).unwrap();
        let b = a.affine(1.0, 0.1).unwrap();
        assert!((scalar(&brightness_loss(&a, &b).unwrap()).unwrap() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn color_examples() {
        let a = rand_img(2, (1, 3, 8, 8));
        assert_eq!(scalar(&color_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let twice = (&a * 2.0).unwrap();
        assert!(scalar(&color_loss(&twice, &a).unwrap()).unwrap() < 1e-7);

        let red = Tensor::new(&[1.0f64, 0.0, 0.0], &Device::Cpu).unwrap().reshape((1, 3, 1, 1)).unwrap();
        let green = Tensor::new(&[0.0f64, 1.0, 0.0], &Device::Cpu).unwrap().reshape((1, 3, 1, 1)).unwrap();
        let v = scalar(&color_loss(&red, &green).unwrap()).unwrap();
        assert!((v - std::f64::consts::FRAC_PI_2).abs() < 1e-12);

        let black = red.zeros_like().unwrap();
        assert_eq!(scalar(&color_loss(&black, &green).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = rand_img(3, (2, 3, 16, 16));
        let b = rand_img(4, (2, 3, 16, 16));
        assert_eq!(scalar(&ssim(&a, &a).unwrap()).unwrap(), 1.0);
        let ab = scalar(&ssim(&a, &b).unwrap()).unwrap();
        let ba = scalar(&ssim(&b, &a).unwrap()).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let c = Tensor::full(0.3f64, (1, 3, 12, 12), &Device::Cpu).unwrap();
        assert_eq!(scalar(&ssim(&c, &c).unwrap()).unwrap(), 1.0);
        let small = Tensor::zeros((1, 3, 10, 10), DType::F64, &Device::Cpu).unwrap();
        assert!(ssim_loss(&small, &small).is_err());
    }

    #[test]
    fn ssim_of_inverse_is_low() {
        let a = rand_img(5, (1, 3, 32, 32));
        let inv = a.affine(-1.0, 1.0).unwrap();
        assert!(scalar(&ssim(&a, &inv).unwrap()).unwrap() < 0.5);
    }

    #[test]
    fn lpips_zero_and_monotone() {
        let fx = extractor();
        let a = rand_img(6, (1, 3, 32, 32)).affine(0.8, 0.0).unwrap();
        assert_eq!(scalar(&lpips_loss(&a, &a, &fx).unwrap()).unwrap(), 0.0);
        let mut r = rng::seeded(9);
        let dir = gaussian_noise(&mut r, (1, 3, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let vals: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|d| {
                let b = (&a + (&dir * *d).unwrap()).unwrap();
                scalar(&lpips_loss(&a, &b, &fx).unwrap()).unwrap()
            })
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2], "{vals:?}");
        let again = scalar(&lpips_loss(&a, &(&a + &dir).unwrap(), &fx).unwrap()).unwrap();
        let again2 = scalar(&lpips_loss(&a, &(&a + &dir).unwrap(), &fx).unwrap()).unwrap();
        assert_eq!(again, again2);
    }

    #[test]
    fn staging() {
        let early = active_terms(5, 20);
        assert!(!early.contains(&LossTerm::Color) && !early.contains(&LossTerm::Brightness));
        assert_eq!(early.len(), 3);
        assert_eq!(active_terms(20, 20).len(), 5);
    }

    #[test]
    fn unit_terms_sum_to_weight_total() {
        let per: BTreeMap<LossTerm, f64> = active_terms(25, 20).into_iter().map(|t| (t, 1.0)).collect();
        let r = LossReport::from_terms(per, active_terms(25, 20), &LossWeights::default());
        assert!((r.total - 153.83).abs() < 1e-9);
    }

    #[test]
    fn composite_zero_at_reference() {
        let fx = extractor();
        let a = rand_img(7, (1, 3, 32, 32));
        for epoch in [0, 30] {
            let c = composite_loss(&a, &a, epoch, 20, &LossWeights::default(), &fx).unwrap();
            assert_eq!(c.report.total, 0.0);
            assert_eq!(scalar(&c.total).unwrap(), 0.0);
        }
    }
}
