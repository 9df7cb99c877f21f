//! Synthesis of training triples from unpaired raw images: a brightened
//! reference, a darkened input, and the 4-channel conditioning map built from
//! the darkened input (per-channel max-normalized color plus a luma SNR map).

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, RawImage};
use crate::rng;

/// Inclusive range of the 8-bit brightness offsets.
pub const SHIFT_RANGE: std::ops::RangeInclusive<u8> = 50..=100;

pub const TRIPLE_KIND: &str = "triple";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct BrightnessPair {
    pub low: RawImage,
    pub high: RawImage,
    /// Offset added for the bright image, 0-255 scale.
    pub shift_high: u8,
    /// Offset subtracted for the dark image, 0-255 scale.
    pub shift_low: u8,
}

/// Per-channel max-normalized image, interleaved HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

/// Single-channel SNR map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrMap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

/// Color map and clamped SNR map stacked as 4 interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

pub const FUSION_CHANNELS: usize = 4;

impl FusionMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * FUSION_CHANNELS + c]
    }

    /// `(1, 4, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.values, (1, self.height, self.width, FUSION_CHANNELS), device)?
                .permute((0, 3, 1, 2))?
                .contiguous()?
                .to_dtype(dtype)?,
        )
    }
}

pub fn stack_fusion(maps: &[&FusionMap], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = maps
        .iter()
        .map(|m| m.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Gaussian filter and stability constant used by [`snr_map`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrParams {
    pub kernel_size: usize,
    pub sigma: f64,
    pub eps: f64,
}

impl Default for SnrParams {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            sigma: 1.5,
            eps: 1e-6,
        }
    }
}

/// Draws one brightening and one darkening offset from `rng_seed` and applies
/// them to every sample, clipping to `[0, 1]`.
pub fn adjust_brightness(raw: &RawImage, rng_seed: u64) -> BrightnessPair {
    let mut rng = rng::seeded(rng_seed);
    let shift_high: u8 = rng.random_range(SHIFT_RANGE);
    let shift_low: u8 = rng.random_range(SHIFT_RANGE);
    apply_shifts(raw, shift_high, shift_low)
}

pub fn apply_shifts(raw: &RawImage, shift_high: u8, shift_low: u8) -> BrightnessPair {
    let up = shift_high as f64 / 255.0;
    let down = shift_low as f64 / 255.0;
    BrightnessPair {
        high: raw.map_clipped(|v| (v as f64 + up) as f32),
        low: raw.map_clipped(|v| (v as f64 - down) as f32),
        shift_high,
        shift_low,
    }
}

pub fn color_map(low: &RawImage) -> ColorMap {
    let mut max = [0f32; 3];
    for px in low.pixels().chunks_exact(3) {
        for c in 0..3 {
            max[c] = max[c].max(px[c]);
        }
    }
    let values = low
        .pixels()
        .chunks_exact(3)
        .flat_map(|px| {
            (0..3).map(move |c| if max[c] > 0.0 { px[c] / max[c] } else { 0.0 })
        })
        .collect();
    ColorMap {
        values,
        height: low.height(),
        width: low.width(),
    }
}

/// `blur(Y) / (|Y - blur(Y)| + eps)` on BT.601 luma `Y`.
pub fn snr_map(low: &RawImage, params: &SnrParams) -> SnrMap {
    let (h, w) = (low.height(), low.width());
    let gray = low.luma();
    let blurred = gaussian_blur(&gray, h, w, params.kernel_size, params.sigma);
    let values = gray
        .iter()
        .zip(&blurred)
        .map(|(&l, &g)| {
            let (l, g) = (l as f64, g as f64);
            (g / ((l - g).abs() + params.eps)) as f32
        })
        .collect();
    SnrMap {
        values,
        height: h,
        width: w,
    }
}

pub fn fuse(c: &ColorMap, n: &SnrMap) -> Result<FusionMap> {
    if c.height != n.height || c.width != n.width {
        return Err(Error::ShapeMismatch(format!(
            "color map is {}x{}, SNR map is {}x{}",
            c.width, c.height, n.width, n.height
        )));
    }
    let values = c
        .values
        .chunks_exact(3)
        .zip(&n.values)
        .flat_map(|(rgb, &s)| [rgb[0], rgb[1], rgb[2], s.clamp(0.0, 1.0)])
        .collect();
    Ok(FusionMap {
        values,
        height: c.height,
        width: c.width,
    })
}

/// Conditioning map for an image acting as the dark input.
pub fn fusion_for(low: &RawImage, params: &SnrParams) -> FusionMap {
    fuse(&color_map(low), &snr_map(low, params)).expect("maps derived from one image share dims")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    pub source_id: String,
    pub low: RawImage,
    pub high: RawImage,
    pub fusion: FusionMap,
    pub shift_high: u8,
    pub shift_low: u8,
    pub seed: u64,
}

pub fn make_triple(raw: &RawImage, seed: u64, params: &SnrParams) -> TrainingTriple {
    let pair = adjust_brightness(raw, seed);
    let fusion = fusion_for(&pair.low, params);
    TrainingTriple {
        source_id: raw.source_id.clone(),
        low: pair.low,
        high: pair.high,
        fusion,
        shift_high: pair.shift_high,
        shift_low: pair.shift_low,
        seed,
    }
}

/// Regular, non-hidden files of `dir` in lexicographic filename order.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| !n.starts_with('.'))
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Decodes every image in `dir` (resized to `image_size` square), skipping
/// undecodable files with a warning.
pub fn load_images(dir: &Path, image_size: usize) -> Result<Vec<RawImage>> {
    let files = list_files(dir)?;
    let mut images = Vec::with_capacity(files.len());
    for path in &files {
        match RawImage::load_resized(path, image_size) {
            Ok(img) => images.push(img),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(images)
}

pub fn build_training_set(
    image_dir: &Path,
    rng_seed: u64,
    image_size: usize,
    params: &SnrParams,
) -> Result<Vec<TrainingTriple>> {
    let images = load_images(image_dir, image_size)?;
    Ok(images
        .iter()
        .enumerate()
        .map(|(i, img)| make_triple(img, rng::derive_seed(rng_seed, i as u64), params))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub shift_high: u8,
    pub shift_low: u8,
    pub path: String,
}

impl TrainingTriple {
    pub fn to_container(&self) -> Container {
        let (h, w) = (self.low.height(), self.low.width());
        let mut c = Container::new(
            TRIPLE_KIND,
            serde_json::json!({
                "source_id": self.source_id,
                "shift_high": self.shift_high,
                "shift_low": self.shift_low,
                "seed": self.seed,
            }),
        );
        c.push("low", vec![h, w, 3], self.low.pixels().to_vec());
        c.push("high", vec![h, w, 3], self.high.pixels().to_vec());
        c.push("fusion", vec![h, w, FUSION_CHANNELS], self.fusion.values.clone());
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Container {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let meta = &c.meta;
        let source_id = meta["source_id"]
            .as_str()
            .ok_or_else(|| bad("missing source_id"))?
            .to_string();
        let shift = |k: &str| {
            meta[k]
                .as_u64()
                .and_then(|v| u8::try_from(v).ok())
                .ok_or_else(|| bad(&format!("missing {k}")))
        };
        let seed = meta["seed"].as_u64().ok_or_else(|| bad("missing seed"))?;
        let tensor = |name: &str| c.get(name).ok_or_else(|| bad(&format!("missing tensor {name}")));
        let low = tensor("low")?;
        let (h, w) = (low.shape[0], low.shape[1]);
        let fusion = tensor("fusion")?;
        if fusion.shape != [h, w, FUSION_CHANNELS] {
            return Err(bad("fusion map shape does not match low image"));
        }
        Ok(Self {
            low: RawImage::new(low.data.clone(), h, w, source_id.clone())?,
            high: RawImage::new(tensor("high")?.data.clone(), h, w, source_id.clone())?,
            fusion: FusionMap {
                values: fusion.data.clone(),
                height: h,
                width: w,
            },
            shift_high: shift("shift_high")?,
            shift_low: shift("shift_low")?,
            seed,
            source_id,
        })
    }
}

/// Writes one container per triple plus a JSON-lines manifest.
pub fn save_triples(triples: &[TrainingTriple], out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = String::new();
    let mut entries = Vec::with_capacity(triples.len());
    for (i, t) in triples.iter().enumerate() {
        let file = format!("{i:05}_{}.uwb", sanitize(&t.source_id));
        t.to_container().write(&out_dir.join(&file))?;
        let entry = ManifestEntry {
            source_id: t.source_id.clone(),
            shift_high: t.shift_high,
            shift_low: t.shift_low,
            path: file,
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
        entries.push(entry);
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn load_triples(dir: &Path) -> Result<Vec<TrainingTriple>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: ManifestEntry = serde_json::from_str(line)?;
        let file = dir.join(&entry.path);
        out.push(TrainingTriple::from_container(
            &Container::read(&file, TRIPLE_KIND)?,
            &file,
        )?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(out)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
