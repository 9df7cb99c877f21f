//! Procedural underwater-looking test scenes: a blue-green water gradient,
//! a few textured rock blobs, and a light falloff toward the edges.

use rand::Rng;

use crate::imaging::RawImage;
use crate::rng;

struct Blob {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    color: [f32; 3],
}

pub fn underwater_scene(height: usize, width: usize, seed: u64) -> RawImage {
    let mut r = rng::seeded(seed);
    let blobs: Vec<Blob> = (0..r.random_range(3..7))
        .map(|_| Blob {
            cy: r.random_range(0.2..1.0),
            cx: r.random_range(0.0..1.0),
            ry: r.random_range(0.08..0.3),
            rx: r.random_range(0.08..0.3),
            color: [
                r.random_range(0.25..0.7),
                r.random_range(0.3..0.7),
                r.random_range(0.2..0.5),
            ],
        })
        .collect();
    let tint = [
        r.random_range(0.05..0.2f32),
        r.random_range(0.35..0.6f32),
        r.random_range(0.45..0.75f32),
    ];
    let freq = r.random_range(8.0..20.0f32);
    let phase = r.random_range(0.0..6.28f32);
    let noise: Vec<f32> = (0..height * width).map(|_| r.random_range(-0.04..0.04)).collect();

    RawImage::from_fn(height, width, format!("scene{seed}"), |y, x| {
        let v = y as f32 / height as f32;
        let u = x as f32 / width as f32;
        let depth = 1.0 - 0.5 * v;
        let mut px = tint.map(|t| t * depth);
        for b in &blobs {
            let d = ((v - b.cy) / b.ry).powi(2) + ((u - b.cx) / b.rx).powi(2);
            if d < 1.0 {
                let texture = 0.5 + 0.5 * (freq * (u + 0.6 * v) + phase).sin() * (freq * 0.7 * v).cos();
                for c in 0..3 {
                    px[c] = b.color[c] * (0.6 + 0.4 * texture) * (1.0 - 0.3 * d);
                }
            }
        }
        let dy = v - 0.45;
        let dx = u - 0.5;
        let falloff = 1.0 - 0.6 * (dx * dx + dy * dy).sqrt();
        let n = noise[y * width + x];
        px.map(|c| (c * falloff + n).clamp(0.0, 1.0))
    })
    .expect("scene dimensions are validated by the caller")
}
