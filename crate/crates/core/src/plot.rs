//! Minimal raster plots for training logs and metric reports.
//!
//! No text rendering: series colors are fixed (see [`SERIES_COLORS`]) and the
//! y axis of each plot spans the data range with a 5% margin.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::pipeline::train::EpochRecord;

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;

/// Total loss first, then one color per loss term in log order.
pub const SERIES_COLORS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])),
        };
        let (x0, y0, x1, y1) = c.frame();
        c.line(x0, y1, x1, y1, [0, 0, 0]);
        c.line(x0, y0, x0, y1, [0, 0, 0]);
        c
    }

    fn frame(&self) -> (i64, i64, i64, i64) {
        (MARGIN, MARGIN / 2, WIDTH as i64 - MARGIN / 2, HEIGHT as i64 - MARGIN)
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    // Bresenham
    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.img.save(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn value_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    Some((lo - pad, hi + pad))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Draws total and per-term losses against epoch.
pub fn loss_curve(records: &[EpochRecord], out: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("training log has no records".into()));
    }
    let mut series: Vec<Vec<(usize, f64)>> = vec![records.iter().map(|r| (r.epoch, r.total)).collect()];
    let mut terms: Vec<_> = records.iter().flat_map(|r| r.losses.keys().copied()).collect();
    terms.sort();
    terms.dedup();
    for term in terms {
        series.push(
            records
                .iter()
                .filter_map(|r| r.losses.get(&term).map(|v| (r.epoch, *v)))
                .collect(),
        );
    }
    let (lo, hi) = value_range(series.iter().flatten().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let e_min = records.iter().map(|r| r.epoch).min().unwrap_or(0) as f64;
    let e_max = records.iter().map(|r| r.epoch).max().unwrap_or(0) as f64;
    let span = (e_max - e_min).max(1.0);

    let mut canvas = Canvas::new();
    let (x0, y0, x1, y1) = canvas.frame();
    let px = |e: usize| x0 + ((e as f64 - e_min) / span * (x1 - x0) as f64).round() as i64;
    let py = |v: f64| y1 - ((v - lo) / (hi - lo) * (y1 - y0) as f64).round() as i64;
    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let pts: Vec<(i64, i64)> = s.iter().filter(|p| p.1.is_finite()).map(|&(e, v)| (px(e), py(v))).collect();
        for w in pts.windows(2) {
            canvas.line(w[0].0, w[0].1, w[1].0, w[1].1, color);
        }
        for &(x, y) in &pts {
            canvas.rect(x - 1, y - 1, x + 1, y + 1, color);
        }
    }
    canvas.save(out)
}

/// One group of bars per image; within a group, bars are UIQM, UISM, and
/// (when present) PSNR and SSIM, each scaled to the largest value of its metric.
pub fn metric_bars(report: &MetricReport, out: &Path) -> Result<()> {
    if report.per_image.is_empty() {
        return Err(Error::InvalidArgument("metric report has no images".into()));
    }
    let getters: Vec<fn(&crate::metrics::ImageMetrics) -> Option<f64>> = {
        let mut g: Vec<fn(&crate::metrics::ImageMetrics) -> Option<f64>> =
            vec![|m| Some(m.uiqm), |m| Some(m.uism)];
        if report.full_reference {
            g.push(|m| m.psnr);
            g.push(|m| m.ssim);
        }
        g
    };
    let maxima: Vec<f64> = getters
        .iter()
        .map(|f| {
            report
                .per_image
                .values()
                .filter_map(f)
                .filter(|v| v.is_finite())
                .map(f64::abs)
                .fold(0.0, f64::max)
        })
        .collect();

    let mut canvas = Canvas::new();
    let (x0, y0, x1, y1) = canvas.frame();
    let groups = report.per_image.len() as i64;
    let group_w = ((x1 - x0) / groups).max(1);
    let bar_w = ((group_w - 4) / getters.len() as i64).max(1);
    for (gi, m) in report.per_image.values().enumerate() {
        for (mi, f) in getters.iter().enumerate() {
            let Some(v) = f(m).filter(|v| v.is_finite()) else { continue };
            let frac = if maxima[mi] > 0.0 { (v.abs() / maxima[mi]).min(1.0) } else { 0.0 };
            let left = x0 + 2 + gi as i64 * group_w + mi as i64 * bar_w;
            let top = y1 - (frac * (y1 - y0) as f64).round() as i64;
            canvas.rect(left, top, left + bar_w - 2, y1 - 1, SERIES_COLORS[1 + mi]);
        }
    }
    canvas.save(out)
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
