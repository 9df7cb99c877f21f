//! RGB image buffers in `[0, 1]` and the small amount of pixel plumbing the rest of
//! the crate needs: decoding, bilinear resize, luma, Gaussian blur, and
//! conversion to and from `(N, C, H, W)` tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

/// Smallest side length accepted for a [`RawImage`].
pub const MIN_SIDE: usize = 8;

/// BT.601 luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// An RGB image with interleaved `f32` samples in `[0, 1]`, row-major, HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    pub source_id: String,
}

impl RawImage {
    pub fn new(
        pixels: Vec<f32>,
        height: usize,
        width: usize,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} samples for {width}x{height}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!(
                "sample {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            height,
            width,
            source_id: source_id.into(),
        })
    }

    /// Builds an image from a per-pixel function returning RGB.
    pub fn from_fn(
        height: usize,
        width: usize,
        source_id: impl Into<String>,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(pixels, height, width, source_id)
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, "constant", |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Copies channel `c` into a planar buffer.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }

    /// Per-pixel BT.601 luma as a planar `H*W` buffer.
    pub fn luma(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect()
    }

    pub fn mean_luma(&self) -> f64 {
        let luma = self.luma();
        luma.iter().map(|&v| v as f64).sum::<f64>() / luma.len() as f64
    }

    pub fn same_dims(&self, other: &RawImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Applies `f` to every sample and clips the result to `[0, 1]`.
    pub fn map_clipped(&self, f: impl Fn(f32) -> f32) -> RawImage {
        RawImage {
            pixels: self.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            height: self.height,
            width: self.width,
            source_id: self.source_id.clone(),
        }
    }

    pub fn flip_horizontal(&self) -> RawImage {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                pixels.extend_from_slice(&self.pixels[i..i + 3]);
            }
        }
        RawImage {
            pixels,
            ..self.clone()
        }
    }

    /// Decodes a PNG/JPEG file, converting to RGB in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_rgb32f(&img.to_rgb32f(), id)
    }

    /// Decodes and bilinearly resizes to `size x size`.
    pub fn load_resized(path: &Path, size: usize) -> Result<Self> {
        let img = Self::load(path)?;
        Ok(img.resize(size, size))
    }

    pub fn from_rgb32f(img: &Rgb32FImage, source_id: impl Into<String>) -> Result<Self> {
        let pixels = img.as_raw().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(
            pixels,
            img.height() as usize,
            img.width() as usize,
            source_id,
        )
    }

    pub fn to_rgb32f(&self) -> Rgb32FImage {
        Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction")
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length checked at construction")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Bilinear resize. A no-op when the size already matches.
    pub fn resize(&self, height: usize, width: usize) -> RawImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let out = imageops::resize(
            &self.to_rgb32f(),
            width as u32,
            height as u32,
            FilterType::Triangle,
        );
        RawImage {
            pixels: out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            height,
            width,
            source_id: self.source_id.clone(),
        }
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (1, self.height, self.width, 3), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`RawImage::to_tensor`] for a `(3, H, W)` or `(1, 3, H, W)` tensor.
    /// Values are clipped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, source_id: impl Into<String>) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => {
                return Err(Error::ShapeMismatch(format!(
                    "expected a rank 3 or 4 image tensor, got rank {r}"
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let pixels: Vec<f32> = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::new(pixels, h, w, source_id)
    }
}

/// Stacks images of identical size into an `(N, 3, H, W)` tensor.
pub fn stack_images(images: &[&RawImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let tensors = images
        .iter()
        .map(|img| img.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&tensors, 0)?)
}

/// Normalized 1-D Gaussian taps of length `size` (odd).
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Reflect-101 index mapping (`-1 -> 1`, `n -> n-2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur of a planar single-channel buffer with reflect-101 borders.
pub fn gaussian_blur(plane: &[f32], height: usize, width: usize, size: usize, sigma: f64) -> Vec<f32> {
    let taps = gaussian_kernel_1d(size, sigma);
    let half = (size / 2) as isize;
    let mut rows = vec![0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                let xx = reflect_index(x as isize + k as isize - half, width);
                acc += w * plane[y * width + xx] as f64;
            }
            rows[y * width + x] = acc;
        }
    }
    let mut out = vec![0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                let yy = reflect_index(y as isize + k as isize - half, height);
                acc += w * rows[yy * width + x];
            }
            out[y * width + x] = acc as f32;
        }
    }
    out
}
