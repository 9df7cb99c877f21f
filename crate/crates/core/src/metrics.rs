//! Full-reference (PSNR, SSIM) and no-reference (UIQM and its UICM, UISM,
//! UIConM components) image quality measures, plus directory evaluation.
//!
//! The no-reference measures operate on the 0-255 intensity scale. Blockwise
//! statistics crop the image to a whole number of blocks from the top-left.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RawImage;
use crate::losses;
use crate::preprocess::list_files;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Every constant used by the underwater quality measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiqmParams {
    pub c_uicm: f64,
    pub c_uism: f64,
    pub c_uiconm: f64,
    /// Fraction trimmed from each tail of the opponent-channel distributions.
    pub trim: f64,
    pub uicm_mean_weight: f64,
    pub uicm_spread_weight: f64,
    pub block_size: usize,
    pub channel_weights: [f64; 3],
}

impl Default for UiqmParams {
    fn default() -> Self {
        Self {
            c_uicm: 0.0282,
            c_uism: 0.2953,
            c_uiconm: 3.5753,
            trim: 0.1,
            uicm_mean_weight: -0.0268,
            uicm_spread_weight: 0.1586,
            block_size: 8,
            channel_weights: [0.299, 0.587, 0.114],
        }
    }
}

fn check_same(pred: &RawImage, reference: &RawImage) -> Result<()> {
    if !pred.same_dims(reference) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            reference.width(),
            reference.height()
        )));
    }
    Ok(())
}

pub fn mse(pred: &RawImage, reference: &RawImage) -> Result<f64> {
    check_same(pred, reference)?;
    let n = pred.pixels().len() as f64;
    Ok(pred
        .pixels()
        .iter()
        .zip(reference.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)` on `[0, 1]` images, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &RawImage, reference: &RawImage) -> Result<f64> {
    let m = mse(pred, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// SSIM similarity, sharing the computation used by the training loss.
pub fn ssim_metric(pred: &RawImage, reference: &RawImage) -> Result<f64> {
    check_same(pred, reference)?;
    let a = pred.to_tensor(DType::F64, &Device::Cpu)?;
    let b = reference.to_tensor(DType::F64, &Device::Cpu)?;
    losses::scalar(&losses::ssim(&a, &b)?)
}

fn planes_255(img: &RawImage) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|c| img.channel(c).into_iter().map(|v| v as f64 * 255.0).collect())
}

fn trimmed_mean(values: &mut [f64], trim: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let k = values.len();
    let lo = (trim * k as f64).ceil() as usize;
    let hi = (trim * k as f64).floor() as usize;
    let kept = &values[lo.min(k)..k.saturating_sub(hi).max(lo.min(k))];
    if kept.is_empty() {
        return 0.0;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Colorfulness from alpha-trimmed statistics of the RG and YB opponent channels.
pub fn uicm(img: &RawImage, params: &UiqmParams) -> f64 {
    let [r, g, b] = planes_255(img);
    let mut rg: Vec<f64> = r.iter().zip(&g).map(|(r, g)| r - g).collect();
    let mut yb: Vec<f64> = r
        .iter()
        .zip(&g)
        .zip(&b)
        .map(|((r, g), b)| (r + g) / 2.0 - b)
        .collect();
    let spread = |v: &[f64], mu: f64| v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
    let mu_rg = trimmed_mean(&mut rg, params.trim);
    let mu_yb = trimmed_mean(&mut yb, params.trim);
    let s_rg = spread(&rg, mu_rg);
    let s_yb = spread(&yb, mu_yb);
    params.uicm_mean_weight * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
        + params.uicm_spread_weight * (s_rg + s_yb).sqrt()
}

/// Symmetric (edge-repeating) border index.
fn symmetric_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Sobel gradient magnitude, rescaled so its maximum is 255 (all-zero stays zero).
fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| plane[symmetric_index(y, h) * w + symmetric_index(x, w)];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|m| *m *= 255.0 / max);
    }
    mag
}

fn block_grid(h: usize, w: usize, block: usize) -> Result<(usize, usize)> {
    let (by, bx) = (h / block, w / block);
    if by == 0 || bx == 0 {
        return Err(Error::InvalidImage(format!(
            "{w}x{h} image is smaller than the {block}x{block} block size"
        )));
    }
    Ok((by, bx))
}

/// Measure of enhancement: `2 / (k1 k2) * sum ln(max / min)` over blocks;
/// blocks with a zero extreme contribute 0.
fn eme(plane: &[f64], h: usize, w: usize, block: usize) -> Result<f64> {
    let (by, bx) = block_grid(h, w, block)?;
    let mut acc = 0.0;
    for j in 0..by {
        for i in 0..bx {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in j * block..(j + 1) * block {
                for x in i * block..(i + 1) * block {
                    let v = plane[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if lo > 0.0 && hi > 0.0 {
                acc += (hi / lo).ln();
            }
        }
    }
    Ok(2.0 / (by * bx) as f64 * acc)
}

/// Sharpness: luma-weighted EME of each channel's Sobel-weighted edge map.
pub fn uism_with(img: &RawImage, params: &UiqmParams) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    block_grid(h, w, params.block_size)?;
    let mut total = 0.0;
    for (plane, weight) in planes_255(img).iter().zip(params.channel_weights) {
        let mag = sobel_magnitude(plane, h, w);
        let edge: Vec<f64> = mag.iter().zip(plane).map(|(m, p)| m * p).collect();
        total += weight * eme(&edge, h, w, params.block_size)?;
    }
    Ok(total)
}

pub fn uism(img: &RawImage) -> Result<f64> {
    uism_with(img, &UiqmParams::default())
}

/// Contrast: negated mean over blocks of `r ln r` with `r = (max - min) / (max + min)`
/// taken over all three channels of the block.
pub fn uiconm(img: &RawImage, params: &UiqmParams) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    let block = params.block_size;
    let (by, bx) = block_grid(h, w, block)?;
    let mut acc = 0.0;
    for j in 0..by {
        for i in 0..bx {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in j * block..(j + 1) * block {
                for x in i * block..(i + 1) * block {
                    for c in 0..3 {
                        let v = img.get(y, x, c) as f64 * 255.0;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let (top, bot) = (hi - lo, hi + lo);
            if top > 0.0 && bot > 0.0 {
                let r = top / bot;
                acc += r * r.ln();
            }
        }
    }
    Ok(-acc / (by * bx) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiqmBreakdown {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

pub fn uiqm_breakdown(img: &RawImage, params: &UiqmParams) -> Result<UiqmBreakdown> {
    let uicm = uicm(img, params);
    let uism = uism_with(img, params)?;
    let uiconm = uiconm(img, params)?;
    Ok(UiqmBreakdown {
        uicm,
        uism,
        uiconm,
        uiqm: params.c_uicm * uicm + params.c_uism * uism + params.c_uiconm * uiconm,
    })
}

pub fn uiqm(img: &RawImage) -> Result<f64> {
    Ok(uiqm_breakdown(img, &UiqmParams::default())?.uiqm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub uiqm: f64,
    pub uism: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: BTreeMap<String, ImageMetrics>,
    pub aggregate: ImageMetrics,
    pub full_reference: bool,
    #[serde(default)]
    pub errors: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl MetricReport {
    pub fn from_rows(per_image: BTreeMap<String, ImageMetrics>, full_reference: bool, errors: Vec<String>) -> Self {
        let col = |f: fn(&ImageMetrics) -> Option<f64>| {
            full_reference.then(|| mean(per_image.values().filter_map(f)))
        };
        let aggregate = ImageMetrics {
            psnr: col(|m| m.psnr),
            ssim: col(|m| m.ssim),
            uiqm: mean(per_image.values().map(|m| m.uiqm)),
            uism: mean(per_image.values().map(|m| m.uism)),
        };
        Self {
            per_image,
            aggregate,
            full_reference,
            errors,
        }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| format!("{v:.6}");
        let mut out = String::new();
        if self.full_reference {
            out.push_str("source_id,psnr,ssim,uiqm,uism\n");
        } else {
            out.push_str("source_id,uiqm,uism\n");
        }
        for (id, m) in &self.per_image {
            out.push_str(id);
            if self.full_reference {
                out.push_str(&format!(
                    ",{},{}",
                    m.psnr.map(fmt).unwrap_or_default(),
                    m.ssim.map(fmt).unwrap_or_default()
                ));
            }
            out.push_str(&format!(",{},{}\n", fmt(m.uiqm), fmt(m.uism)));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to `out` (its extension is ignored).
    pub fn write(&self, out: &Path) -> Result<(PathBuf, PathBuf)> {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = out.with_extension("json");
        let csv = out.with_extension("csv");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok((json, csv))
    }
}

/// Finds the reference for a prediction: same file name, then same stem with
/// any extension, then the stem with an `_enhanced` suffix removed.
fn find_reference(pred: &Path, refs: &[PathBuf]) -> Option<PathBuf> {
    let name = pred.file_name()?;
    let stem = pred.file_stem()?.to_string_lossy().into_owned();
    let base = stem.strip_suffix(crate::pipeline::ENHANCED_SUFFIX).unwrap_or(&stem).to_string();
    refs.iter()
        .find(|r| r.file_name() == Some(name))
        .or_else(|| refs.iter().find(|r| r.file_stem().map(|s| s.to_string_lossy() == stem).unwrap_or(false)))
        .or_else(|| refs.iter().find(|r| r.file_stem().map(|s| s.to_string_lossy() == base).unwrap_or(false)))
        .cloned()
}

/// Scores every decodable image in `pred_dir`. With `ref_dir`, PSNR and SSIM
/// are computed against the matching reference (resized to the prediction's
/// size when they differ); predictions without a counterpart are listed in
/// `errors` and left out of the aggregates.
pub fn evaluate_dir(pred_dir: &Path, ref_dir: Option<&Path>) -> Result<MetricReport> {
    let preds = list_files(pred_dir)?;
    let refs = match ref_dir {
        Some(d) => list_files(d)?,
        None => Vec::new(),
    };
    let mut rows = BTreeMap::new();
    let mut errors = Vec::new();
    for path in &preds {
        let img = match RawImage::load(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                errors.push(e.to_string());
                continue;
            }
        };
        let id = img.source_id.clone();
        let (mut psnr_v, mut ssim_v) = (None, None);
        if ref_dir.is_some() {
            let Some(ref_path) = find_reference(path, &refs) else {
                errors.push(format!("{id}: no reference image found"));
                continue;
            };
            let reference = RawImage::load(&ref_path)?.resize(img.height(), img.width());
            psnr_v = Some(psnr(&img, &reference)?);
            ssim_v = Some(ssim_metric(&img, &reference)?);
        }
        let row = ImageMetrics {
            psnr: psnr_v,
            ssim: ssim_v,
            uiqm: uiqm(&img)?,
            uism: uism(&img)?,
        };
        rows.insert(id, row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(pred_dir.to_path_buf()));
    }
    Ok(MetricReport::from_rows(rows, ref_dir.is_some(), errors))
}
