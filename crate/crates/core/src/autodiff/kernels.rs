//! Raw numeric kernels behind the tape ops. All buffers are row-major.

/// `c (m×n) = a (m×k) · b (k×n) [+ c]`, with optional transposed storage of
/// either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // extents whose lengths were asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Output positions `o` with `0 <= o*stride + k - padding < n`.
    fn valid_range(n: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
        // first o with o*s + k >= p
        let lo = if k >= padding {
            0
        } else {
            (padding - k).div_ceil(stride)
        };
        // last o with o*s + k - p <= n-1  =>  o <= (n - 1 + p - k) / s
        let hi = if n + padding > k {
            ((n - 1 + padding - k) / stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one C×H×W image into a `(C·K·K) × (OH·OW)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (kk, ow_n) = (g.kernel, g.out_width);
    let plane = g.col_cols();
    col.fill(0.0);
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kk {
            let (oh_lo, oh_hi) = ConvGeom::valid_range(g.height, g.out_height, ki, g.stride, g.padding);
            for kj in 0..kk {
                let (ow_lo, ow_hi) = ConvGeom::valid_range(g.width, ow_n, kj, g.stride, g.padding);
                let row = (c * kk + ki) * kk + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.padding;
                    let src = &xc[ih * g.width..(ih + 1) * g.width];
                    let drow = &mut dst[oh * ow_n..(oh + 1) * ow_n];
                    if g.stride == 1 {
                        let iw0 = ow_lo + kj - g.padding;
                        drow[ow_lo..ow_hi].copy_from_slice(&src[iw0..iw0 + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            drow[ow] = src[ow * g.stride + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds patch columns back into an image.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (kk, ow_n) = (g.kernel, g.out_width);
    let plane = g.col_cols();
    for c in 0..g.channels {
        let xc = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kk {
            let (oh_lo, oh_hi) = ConvGeom::valid_range(g.height, g.out_height, ki, g.stride, g.padding);
            for kj in 0..kk {
                let (ow_lo, ow_hi) = ConvGeom::valid_range(g.width, ow_n, kj, g.stride, g.padding);
                let row = (c * kk + ki) * kk + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.padding;
                    let dst = &mut xc[ih * g.width..(ih + 1) * g.width];
                    let srow = &src[oh * ow_n..(oh + 1) * ow_n];
                    if g.stride == 1 {
                        let iw0 = ow_lo + kj - g.padding;
                        for (d, s) in dst[iw0..iw0 + (ow_hi - ow_lo)]
                            .iter_mut()
                            .zip(&srow[ow_lo..ow_hi])
                        {
                            *d += s;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            dst[ow * g.stride + kj - g.padding] += srow[ow];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel correlation: `y[c] = x[c] ⋆ w[c]` for one C×H×W image.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], g: &ConvGeom, y: &mut [f64]) {
    let kk = g.kernel;
    let (hw, ohw) = (g.height * g.width, g.out_height * g.out_width);
    for c in 0..g.channels {
        let xc = &x[c * hw..(c + 1) * hw];
        let yc = &mut y[c * ohw..(c + 1) * ohw];
        for ki in 0..kk {
            let (oh_lo, oh_hi) = ConvGeom::valid_range(g.height, g.out_height, ki, g.stride, g.padding);
            for kj in 0..kk {
                let (ow_lo, ow_hi) = ConvGeom::valid_range(g.width, g.out_width, kj, g.stride, g.padding);
                let wv = w[(c * kk + ki) * kk + kj];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.padding;
                    let src = &xc[ih * g.width..(ih + 1) * g.width];
                    let dst = &mut yc[oh * g.out_width + ow_lo..oh * g.out_width + ow_hi];
                    let src = src[ow_lo * g.stride + kj - g.padding..].iter().step_by(g.stride);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`] w.r.t. input (`dx`) and kernels (`dw`),
/// both accumulated.
pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let kk = g.kernel;
    let (hw, ohw) = (g.height * g.width, g.out_height * g.out_width);
    let mut dx = dx;
    let mut dw = dw;
    for c in 0..g.channels {
        let xc = &x[c * hw..(c + 1) * hw];
        let dyc = &dy[c * ohw..(c + 1) * ohw];
        for ki in 0..kk {
            let (oh_lo, oh_hi) = ConvGeom::valid_range(g.height, g.out_height, ki, g.stride, g.padding);
            for kj in 0..kk {
                let (ow_lo, ow_hi) = ConvGeom::valid_range(g.width, g.out_width, kj, g.stride, g.padding);
                let widx = (c * kk + ki) * kk + kj;
                let wv = w[widx];
                let mut acc = 0.0;
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.padding;
                    let grow = &dyc[oh * g.out_width + ow_lo..oh * g.out_width + ow_hi];
                    let first = ih * g.width + ow_lo * g.stride + kj - g.padding;
                    if let Some(dx) = dx.as_deref_mut() {
                        let dst = dx[c * hw + first..c * hw + (ih + 1) * g.width].iter_mut().step_by(g.stride);
                        for (d, gv) in dst.zip(grow) {
                            *d += wv * gv;
                        }
                    }
                    let src = xc[first..(ih + 1) * g.width].iter().step_by(g.stride);
                    for (gv, s) in grow.iter().zip(src) {
                        acc += gv * s;
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}
