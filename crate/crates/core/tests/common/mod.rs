//! Reference implementations shared by integration tests. They use different
//! algebra and traversal order from the library so agreement is meaningful.
#![allow(dead_code)]

/// Mean squared error via the expanded form `Σa² − 2Σab + Σb²`.
pub fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (mut aa, mut ab, mut bb) = (0.0, 0.0, 0.0);
    for i in (0..a.len()).rev() {
        aa += a[i] * a[i];
        ab += a[i] * b[i];
        bb += b[i] * b[i];
    }
    (aa - 2.0 * ab + bb) / a.len() as f64
}

pub fn psnr_oracle(a: &[f64], b: &[f64], range: f64) -> f64 {
    20.0 * range.log10() - 10.0 * mse_oracle(a, b).log10()
}

pub fn rmse_oracle(a: &[f64], b: &[f64]) -> f64 {
    mse_oracle(a, b).sqrt()
}

/// SSIM over non-overlapping 8×8 tiles, raw-moment form, column-major scan.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let c1 = 0.01 * 0.01 * range * range;
    let c2 = 0.03 * 0.03 * range * range;
    let (th, tw) = (8.min(h), 8.min(w));
    let mut scores = Vec::new();
    for tj in 0..w / tw {
        for ti in 0..h / th {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in tj * tw..(tj + 1) * tw {
                for i in ti * th..(ti + 1) * th {
                    let (x, y) = (a[i * w + j], b[i * w + j]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let n = (th * tw) as f64;
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            scores.push(lum * cs);
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Direct nested-loop 2-D convolution (cross-correlation), NCHW / OIHW.
pub fn conv2d_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let (ii, jj) = ((i * stride + p) as isize - pad as isize, (j * stride + q) as isize - pad as isize);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + ii as usize) * w + jj as usize]
                                    * k[((oc * c + ic) * kh + p) * kw + q];
                            }
                        }
                    }
                    y[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (y, oh, ow)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
