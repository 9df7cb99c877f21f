//! Straight-line reference implementations used as test oracles. They are
//! written from the formulas, not from the library code, and favor clarity
//! over speed.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwbright::RawImage;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, r: &mut impl Rng) -> RawImage {
    let px: Vec<f32> = (0..h * w * 3).map(|_| r.random::<f32>()).collect();
    RawImage::new(px, h, w, "random").unwrap()
}

pub fn tensor_f64(img: &RawImage) -> Tensor {
    img.to_tensor(DType::F64, &Device::Cpu).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn mse_oracle(a: &RawImage, b: &RawImage) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let d = a.get(y, x, c) as f64 - b.get(y, x, c) as f64;
                s += d * d;
            }
        }
    }
    s / (a.height() * a.width() * 3) as f64
}

pub fn psnr_oracle(a: &RawImage, b: &RawImage) -> f64 {
    let m = mse_oracle(a, b);
    if m == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / m).log10()).min(100.0)
    }
}

/// 11x11 Gaussian window, sigma 1.5, normalized over all 121 taps.
pub fn ssim_window() -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    for row in &mut w {
        for v in row {
            *v /= total;
        }
    }
    w
}

/// Mean SSIM over channels and every fully-contained 11x11 window.
pub fn ssim_oracle(a: &RawImage, b: &RawImage) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = ssim_window();
    let (h, w) = (a.height(), a.width());
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        ma += win[i][j] * a.get(y0 + i, x0 + j, c) as f64;
                        mb += win[i][j] * b.get(y0 + i, x0 + j, c) as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let da = a.get(y0 + i, x0 + j, c) as f64 - ma;
                        let db = b.get(y0 + i, x0 + j, c) as f64 - mb;
                        va += win[i][j] * da * da;
                        vb += win[i][j] * db * db;
                        cov += win[i][j] * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Mirror index without repeating the edge sample: -1 -> 1, n -> n - 2.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Local SNR at one pixel, with a full 2-D 5x5 Gaussian (sigma 1.5) on luma.
pub fn snr_at(img: &RawImage, y: usize, x: usize, eps: f64) -> f64 {
    let luma = |yy: usize, xx: usize| {
        0.299 * img.get(yy, xx, 0) as f64 + 0.587 * img.get(yy, xx, 1) as f64 + 0.114 * img.get(yy, xx, 2) as f64
    };
    let mut total = 0.0;
    let mut acc = 0.0;
    for dy in -2isize..=2 {
        for dx in -2isize..=2 {
            let k = (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
            let yy = reflect(y as isize + dy, img.height());
            let xx = reflect(x as isize + dx, img.width());
            acc += k * luma(yy, xx);
            total += k;
        }
    }
    let g = acc / total;
    g / ((luma(y, x) - g).abs() + eps)
}

/// Central finite difference of `f` along `dir` at `x`, against the analytic
/// directional derivative `grad . dir`. Returns `(numeric, analytic)`.
pub fn directional_check(
    f: impl Fn(&Tensor) -> Tensor,
    x: &Tensor,
    grad: &Tensor,
    dir: &Tensor,
    h: f64,
) -> (f64, f64) {
    let plus = scalar(&f(&(x + (dir * h).unwrap()).unwrap()));
    let minus = scalar(&f(&(x - (dir * h).unwrap()).unwrap()));
    let numeric = (plus - minus) / (2.0 * h);
    let analytic = to_vec(grad).iter().zip(to_vec(dir)).map(|(g, d)| g * d).sum();
    (numeric, analytic)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Separable Gaussian blur of each channel with edge clamping.
pub fn blur(img: &RawImage, radius: isize, sigma: f64) -> RawImage {
    let k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let (h, w) = (img.height(), img.width());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    s += kv * img.get(y, clamp(x as isize + i as isize - radius, w), c) as f64;
                }
                tmp[(y * w + x) * 3 + c] = s / norm;
            }
        }
    }
    RawImage::from_fn(h, w, format!("{}_blur", img.source_id), |y, x| {
        [0, 1, 2].map(|c| {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[(clamp(y as isize + i as isize - radius, h) * w + x) * 3 + c];
            }
            (s / norm) as f32
        })
    })
    .unwrap()
}
