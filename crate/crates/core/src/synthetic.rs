//! Deterministic procedural test images: smooth shading, hard-edged shapes and
//! oriented gratings, so there is high-frequency content to super-resolve.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{degrade, luminance_of, DataError, ImagePair};

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Grating { cx: f64, cy: f64, r: f64, freq: f64, angle: f64 },
}

pub fn synthetic_image(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let base: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let grad: [f64; 2] = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(6..12))
        .map(|_| {
            let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disk {
                    cx: rng.random_range(0.0..w),
                    cy: rng.random_range(0.0..h),
                    r: rng.random_range(0.05..0.25) * w.min(h),
                },
                1 => {
                    let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                    Shape::Rect {
                        x0,
                        y0,
                        x1: x0 + rng.random_range(0.1..0.4) * w,
                        y1: y0 + rng.random_range(0.1..0.4) * h,
                    }
                }
                _ => Shape::Grating {
                    cx: rng.random_range(0.0..w),
                    cy: rng.random_range(0.0..h),
                    r: rng.random_range(0.15..0.35) * w.min(h),
                    freq: rng.random_range(0.05..0.3),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                },
            };
            (shape, color)
        })
        .collect();
    let noise = 0.01;
    RgbImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let shade = grad[0] * (fx / w - 0.5) + grad[1] * (fy / h - 0.5);
        let mut px = base.map(|b| b + shade);
        for (shape, color) in &shapes {
            let cover = match *shape {
                Shape::Disk { cx, cy, r } => ((fx - cx).hypot(fy - cy) < r) as u8 as f64,
                Shape::Rect { x0, y0, x1, y1 } => (fx >= x0 && fx < x1 && fy >= y0 && fy < y1) as u8 as f64,
                Shape::Grating { cx, cy, r, freq, angle } => {
                    if (fx - cx).hypot(fy - cy) < r {
                        let t = (fx - cx) * angle.cos() + (fy - cy) * angle.sin();
                        0.5 + 0.5 * (std::f64::consts::TAU * freq * t).sin()
                    } else {
                        0.0
                    }
                }
            };
            for c in 0..3 {
                px[c] = px[c] * (1.0 - cover) + color[c] * cover;
            }
        }
        let pixel = px.map(|v| {
            let jitter = rng.random_range(-noise..noise);
            ((v + jitter).clamp(0.0, 1.0) * 255.0).round() as u8
        });
        Rgb(pixel)
    })
}

/// Writes `count` PNGs named `{prefix}{i:03}.png` into `dir`.
pub fn write_synthetic_set(
    dir: &Path,
    prefix: &str,
    count: usize,
    width: u32,
    height: u32,
    seed: u64,
) -> Result<Vec<PathBuf>, image::ImageError> {
    fs::create_dir_all(dir)?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("{prefix}{i:03}.png"));
            synthetic_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), width, height).save(&path)?;
            Ok(path)
        })
        .collect()
}

/// In-memory degraded pairs built from synthetic images, named `synth{i:03}`.
pub fn synthetic_pairs(seed: u64, count: usize, width: u32, height: u32, scale: usize) -> Result<Vec<ImagePair>, DataError> {
    (0..count)
        .map(|i| {
            let img = DynamicImage::ImageRgb8(synthetic_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), width, height));
            let mut pair = degrade(&luminance_of(&img), scale)?;
            pair.name = format!("synth{i:03}");
            Ok(pair)
        })
        .collect()
}
