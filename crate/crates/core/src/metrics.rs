//! Image quality metrics over row-major single-channel images.
//!
//! All reductions run in a fixed sequential order, so results are bitwise
//! reproducible.

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(op, "len", format!("{} vs {} pixels", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check("mse", a, b)?;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+∞` for identical images.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    if data_range <= 0.0 || !data_range.is_finite() {
        return Err(Error::Validation(format!("data range must be > 0, got {data_range}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// Mean SSIM over non-overlapping `8×8` tiles with uniform weights and
/// population statistics. A side shorter than 8 uses one tile spanning it;
/// trailing rows/columns that do not fill a tile are skipped.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, data_range: f64) -> Result<f64> {
    check("ssim", a, b)?;
    if height * width != a.len() {
        return Err(Error::dim("ssim", "H×W", format!("{height}×{width} does not match {} pixels", a.len())));
    }
    if data_range <= 0.0 || !data_range.is_finite() {
        return Err(Error::Validation(format!("data range must be > 0, got {data_range}")));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (wh, ww) = (SSIM_WINDOW.min(height), SSIM_WINDOW.min(width));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut tiles = 0usize;
    for ti in 0..height / wh {
        for tj in 0..width / ww {
            let (mut sa, mut sb) = (0.0, 0.0);
            for i in ti * wh..(ti + 1) * wh {
                for j in tj * ww..(tj + 1) * ww {
                    sa += a[i * width + j];
                    sb += b[i * width + j];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for i in ti * wh..(ti + 1) * wh {
                for j in tj * ww..(tj + 1) * ww {
                    let da = a[i * width + j] - ma;
                    let db = b[i * width + j] - mb;
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
            tiles += 1;
        }
    }
    Ok(total / tiles as f64)
}
