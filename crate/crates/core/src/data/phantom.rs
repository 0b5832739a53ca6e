use rand::Rng;

use super::Image;
use crate::error::{Error, Result};

/// Piecewise-smooth anatomy-like phantom: a bright elliptical ring around a
/// soft-tissue body holding 3–8 random ellipses, one 3×3 box blur, clipped
/// to `[0, 1]`.
pub fn generate_phantom<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Image> {
    if size < 16 {
        return Err(Error::Validation(format!("phantom size must be >= 16, got {size}")));
    }
    let n = size as f64;
    let norm = |i: usize, j: usize| ((j as f64 + 0.5) / n * 2.0 - 1.0, (i as f64 + 0.5) / n * 2.0 - 1.0);

    let background = rng.random_range(0.0..0.05);
    let body = rng.random_range(0.25..0.45);
    let ring = rng.random_range(0.8..0.95);
    let (ax, ay) = (rng.random_range(0.78..0.92), rng.random_range(0.7..0.9));
    let thickness = rng.random_range(0.06..0.12);

    let mut img = Image::zeros(size, size);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = norm(i, j);
            let r = (x / ax).powi(2) + (y / ay).powi(2);
            let inner = (x / (ax - thickness)).powi(2) + (y / (ay - thickness)).powi(2);
            img.data[i * size + j] = if inner <= 1.0 {
                body
            } else if r <= 1.0 {
                ring
            } else {
                background
            };
        }
    }

    let count = rng.random_range(3..=8);
    for _ in 0..count {
        let cx = rng.random_range(-0.5..0.5);
        let cy = rng.random_range(-0.5..0.5);
        let rx = rng.random_range(0.08..0.35);
        let ry = rng.random_range(0.08..0.35);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let delta = rng.random_range(-0.25..0.45);
        let (s, c) = theta.sin_cos();
        for i in 0..size {
            for j in 0..size {
                let (x, y) = norm(i, j);
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    img.data[i * size + j] += delta;
                }
            }
        }
    }

    let blurred = box_blur(&img);
    Ok(blurred.clamped())
}

/// 3×3 mean with edge replication.
fn box_blur(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let y = (i as isize + di).clamp(0, h as isize - 1) as usize;
                    let x = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                    acc += img.get(y, x);
                }
            }
            out.data[i * w + j] = acc / 9.0;
        }
    }
    out
}
