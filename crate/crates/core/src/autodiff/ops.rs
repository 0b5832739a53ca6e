use super::kernels::{self, ConvGeom};
use super::{CustomBackward, Node, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What to do with a transposed convolution whose kernel size is not a
/// multiple of its stride (uneven overlap, checkerboard artifacts).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CheckerboardPolicy {
    #[default]
    Error,
    Warn,
}

#[derive(Clone, Copy)]
pub(crate) enum MatmulBatch {
    /// Both operands share the same leading dims.
    Paired(usize),
    /// `b` has no leading dims.
    BroadcastB(usize),
    /// `a` has no leading dims.
    BroadcastA(usize),
}

/// Border handling for [`Tape::pad2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Mirror without repeating the edge pixel (`d c b | a b c d | c b a`).
    Reflect,
    /// Repeat the edge pixel.
    Replicate,
}

/// Marks a padded position with no source pixel.
const NO_SOURCE: usize = usize::MAX;

fn pad_source(i: isize, n: usize, mode: PadMode) -> usize {
    let n = n as isize;
    if (0..n).contains(&i) {
        return i as usize;
    }
    match mode {
        PadMode::Zeros => NO_SOURCE,
        PadMode::Replicate => i.clamp(0, n - 1) as usize,
        PadMode::Reflect => {
            let period = 2 * (n - 1);
            let mut k = i.rem_euclid(period);
            if k >= n {
                k = period - k;
            }
            k as usize
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        batch: MatmulBatch,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        /// Geometry of the forward conv this op is the adjoint of.
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu {
        x: Var,
        /// Φ(x) per element, reused by the backward pass.
        cdf: Vec<f64>,
    },
    Pad2d {
        x: Var,
        /// Source offset within an input plane for each output-plane element.
        index: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | AddBias(a, b) => vec![*a, *b],
            Scale(a, _) | Sum(a) | Mean(a) | Reshape(a) | Permute(a, _) | Softmax(a) => {
                vec![*a]
            }
            Narrow { x, .. } | Pad2d { x, .. } | Gelu { x, .. } => vec![*x],
            Concat(v, _) => v.clone(),
            Matmul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, bias, .. }
            | ConvTranspose2d { x, w, bias, .. }
            | Depthwise { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            MulScalar(..) => "mul_scalar",
            AddBias(..) => "add_bias",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Reshape(..) => "reshape",
            Permute(..) => "permute",
            Concat(..) => "concat",
            Narrow { .. } => "narrow",
            Pad2d { .. } => "pad2d",
            Matmul { .. } => "matmul",
            Conv2d { .. } => "conv2d",
            ConvTranspose2d { .. } => "conv_transpose2d",
            Depthwise { .. } => "depthwise_conv2d",
            LayerNorm { .. } => "layer_norm",
            Softmax(..) => "softmax",
            Gelu { .. } => "gelu",
            Custom { .. } => "custom",
        }
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64, cdf: f64) -> f64 {
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `(outer, axis_len, inner)` split of `dims` around `axis`.
fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(op, "dims", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.dims().to_vec(), data)
}

/// Generic axis permutation: `out.dims[i] = x.dims[axes[i]]`.
fn permute_data(x: &Tensor, axes: &[usize]) -> Tensor {
    let dims = x.dims();
    let rank = dims.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (last_len, last_stride) = (out_dims[last], strides[last]);
    let mut base = 0usize;
    loop {
        for j in 0..last_len {
            out.push(src[base + j * last_stride]);
        }
        // advance all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::from_parts(out_dims, out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p >= k).then(|| (n + 2 * p - k) / s + 1)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_dims("add", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_dims("sub", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_dims("mul", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::dim("mul_scalar", "scalar", format!("got dims {:?}", sv.dims())));
        }
        let c = sv.data()[0];
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let last = *ta.dims().last().unwrap();
        if tb.len() != last {
            return Err(Error::dim(
                "add_bias",
                "last",
                format!("bias has {} elements, last axis is {last}", tb.len()),
            ));
        }
        let b = tb.data();
        let data = ta
            .data()
            .chunks(last)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(ta.dims().to_vec(), data);
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank() || axes.iter().any(|&x| x >= t.rank() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim(
                "permute",
                "axes",
                format!("{axes:?} is not a permutation of rank {}", t.rank()),
            ));
        }
        let out = permute_data(t, axes);
        Ok(self.push(out, Op::Permute(a, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::dim("transpose_last", "rank", "need rank ≥ 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).dims().to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", "axis", format!("axis {axis} on rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let d = self.value(p).dims();
            let ok = d.len() == first.len()
                && d.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                let name = match axis {
                    1 if first.len() == 4 => "spatial/batch",
                    _ => "non-concat axes",
                };
                return Err(Error::dim("concat", name, format!("{first:?} vs {d:?}")));
            }
            total += d[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.dims()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut dims = first;
        dims[axis] = total;
        Ok(self.push(Tensor::from_parts(dims, data), Op::Concat(parts.to_vec(), axis)))
    }

    /// Concatenates two B×C×H×W tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).bchw("concat_channels")?;
        self.value(b).bchw("concat_channels")?;
        self.concat(&[a, b], 1)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.dims()[axis] || len == 0 {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis}"),
                format!("[{start}, {}) out of {:?}", start + len, t.dims()),
            ));
        }
        let (outer, n, inner) = split_axis(t.dims(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut dims = t.dims().to_vec();
        dims[axis] = len;
        Ok(self.push(Tensor::from_parts(dims, data), Op::Narrow { x, axis, start }))
    }

    /// Pads both spatial axes of `B×C×H×W` by `pad` on every side.
    pub fn pad2d(&mut self, x: Var, pad: usize, mode: PadMode) -> Result<Var> {
        let (b, c, h, w) = self.value(x).bchw("pad2d")?;
        if mode == PadMode::Reflect && (pad >= h || pad >= w) {
            return Err(Error::dim(
                "pad2d",
                "H/W",
                format!("reflect padding {pad} needs sides larger than the pad, got {h}×{w}"),
            ));
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut index = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            let si = pad_source(i as isize - pad as isize, h, mode);
            for j in 0..ow {
                let sj = pad_source(j as isize - pad as isize, w, mode);
                index.push(if si == NO_SOURCE || sj == NO_SOURCE { NO_SOURCE } else { si * w + sj });
            }
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * c * oh * ow);
        for plane in src.chunks(h * w) {
            data.extend(index.iter().map(|&k| if k == NO_SOURCE { 0.0 } else { plane[k] }));
        }
        Ok(self.push(Tensor::from_parts(vec![b, c, oh, ow], data), Op::Pad2d { x, index }))
    }

    /// Batched matrix product `…×m×k · …×k×n`; a side without leading dims
    /// broadcasts against the other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() < 2 {
            return Err(Error::dim("matmul", "rank", "operands need rank ≥ 2"));
        }
        let (da, db) = (ta.dims(), tb.dims());
        let (m, k) = (da[da.len() - 2], da[da.len() - 1]);
        let (k2, n) = (db[db.len() - 2], db[db.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", "inner", format!("{da:?} · {db:?}")));
        }
        let (la, lb) = (&da[..da.len() - 2], &db[..db.len() - 2]);
        let (batch, lead) = if la == lb {
            (MatmulBatch::Paired(la.iter().product()), la)
        } else if lb.is_empty() {
            (MatmulBatch::BroadcastB(la.iter().product()), la)
        } else if la.is_empty() {
            (MatmulBatch::BroadcastA(lb.iter().product()), lb)
        } else {
            return Err(Error::dim("matmul", "batch", format!("{da:?} · {db:?}")));
        };
        let mut dims = lead.to_vec();
        dims.extend([m, n]);
        let mut out = vec![0.0; dims.iter().product()];
        let (sa, sb) = (ta.data(), tb.data());
        match batch {
            MatmulBatch::BroadcastB(nb) => kernels::gemm(nb * m, k, n, sa, false, sb, false, &mut out, false),
            MatmulBatch::Paired(nb) => {
                for i in 0..nb {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &sa[i * m * k..(i + 1) * m * k],
                        false,
                        &sb[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
            MatmulBatch::BroadcastA(nb) => {
                for i in 0..nb {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        sa,
                        false,
                        &sb[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        Ok(self.push(Tensor::from_parts(dims, out), Op::Matmul { a, b, m, k, n, batch }))
    }

    /// Cross-correlation of B×InC×H×W input with OutC×InC×K×K weights.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let op = "conv2d";
        let (b, ci, h, wd) = self.value(x).bchw(op)?;
        let (co, wci, kh, kw) = self.value(w).bchw(op)?;
        if wci != ci {
            return Err(Error::dim(op, "InC", format!("weight expects {wci} input channels, input has {ci}")));
        }
        if kh != kw {
            return Err(Error::dim(op, "kernel", format!("non-square kernel {kh}×{kw}")));
        }
        check_bias(self, op, bias, co)?;
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be ≥ 1".into()));
        }
        let (Some(oh), Some(ow)) = (conv_out(h, kh, stride, padding), conv_out(wd, kw, stride, padding)) else {
            return Err(Error::dim(op, "H/W", format!("{h}×{wd} too small for kernel {kh} with padding {padding}")));
        };
        let geom = ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; b * co * cols];
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        for n in 0..b {
            kernels::im2col(&xs[n * ci * h * wd..(n + 1) * ci * h * wd], &geom, &mut col);
            kernels::gemm(co, rows, cols, ws, false, &col, false, &mut out[n * co * cols..(n + 1) * co * cols], false);
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), cols);
        }
        let t = Tensor::from_parts(vec![b, co, oh, ow], out);
        Ok(self.push(t, Op::Conv2d { x, w, bias, geom }))
    }

    /// Transposed convolution with InC×OutC×K×K weights; the adjoint of
    /// [`Tape::conv2d`] under the same weights.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let op = "conv_transpose2d";
        let (b, ci, h, wd) = self.value(x).bchw(op)?;
        let (wci, co, kh, kw) = self.value(w).bchw(op)?;
        if wci != ci {
            return Err(Error::dim(op, "InC", format!("weight expects {wci} input channels, input has {ci}")));
        }
        if kh != kw {
            return Err(Error::dim(op, "kernel", format!("non-square kernel {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d stride must be ≥ 1".into()));
        }
        if kh % stride != 0 {
            match self.checkerboard {
                CheckerboardPolicy::Error => return Err(Error::Checkerboard { kernel: kh, stride }),
                CheckerboardPolicy::Warn => {
                    log::warn!("conv_transpose2d: kernel {kh} not divisible by stride {stride}; expect checkerboard artifacts")
                }
            }
        }
        check_bias(self, op, bias, co)?;
        let full = |n: usize| (n - 1) * stride + kh;
        if full(h) <= 2 * padding || full(wd) <= 2 * padding {
            return Err(Error::dim(op, "H/W", format!("padding {padding} leaves no output for {h}×{wd}")));
        }
        let (oh, ow) = (full(h) - 2 * padding, full(wd) - 2 * padding);
        let geom = ConvGeom {
            channels: co,
            height: oh,
            width: ow,
            kernel: kh,
            stride,
            padding,
            out_height: h,
            out_width: wd,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; b * co * oh * ow];
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        for n in 0..b {
            kernels::gemm(rows, ci, cols, ws, true, &xs[n * ci * cols..(n + 1) * ci * cols], false, &mut col, false);
            kernels::col2im(&col, &geom, &mut out[n * co * oh * ow..(n + 1) * co * oh * ow]);
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), oh * ow);
        }
        let t = Tensor::from_parts(vec![b, co, oh, ow], out);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, bias, geom }))
    }

    /// One K×K kernel per channel (weights C×1×K×K).
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let op = "depthwise_conv2d";
        let (b, c, h, wd) = self.value(x).bchw(op)?;
        let (wc, one, kh, kw) = self.value(w).bchw(op)?;
        if wc != c {
            return Err(Error::dim(op, "C", format!("{wc} kernels for {c} channels")));
        }
        if one != 1 || kh != kw {
            return Err(Error::dim(op, "kernel", format!("expected C×1×K×K, got {:?}", self.dims(w))));
        }
        check_bias(self, op, bias, c)?;
        if stride == 0 {
            return Err(Error::Config("depthwise stride must be ≥ 1".into()));
        }
        let (Some(oh), Some(ow)) = (conv_out(h, kh, stride, padding), conv_out(wd, kw, stride, padding)) else {
            return Err(Error::dim(op, "H/W", format!("{h}×{wd} too small for kernel {kh}")));
        };
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        };
        let mut out = vec![0.0; b * c * oh * ow];
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        for n in 0..b {
            kernels::depthwise_forward(
                &xs[n * c * h * wd..(n + 1) * c * h * wd],
                ws,
                &geom,
                &mut out[n * c * oh * ow..(n + 1) * c * oh * ow],
            );
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), oh * ow);
        }
        let t = Tensor::from_parts(vec![b, c, oh, ow], out);
        Ok(self.push(t, Op::Depthwise { x, w, bias, geom }))
    }

    /// Normalizes over the last axis, then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be > 0".into()));
        }
        let t = self.value(x);
        let c = *t.dims().last().unwrap();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).len() != c {
                return Err(Error::dim(
                    "layer_norm",
                    "C",
                    format!("{name} has {} elements, tokens have {c}", self.value(p).len()),
                ));
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.len() / c;
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mu) * r;
                xhat.push(xh);
                out.push(g[j] * xh + bt[j]);
            }
        }
        let out = Tensor::from_parts(t.dims().to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.dims().last().unwrap();
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for v in row {
                let e = (v - mx).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        let out = Tensor::from_parts(t.dims().to_vec(), out);
        self.push(out, Op::Softmax(x))
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cdf: Vec<f64> = t.data().iter().map(|&v| normal_cdf(v)).collect();
        let out = t.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let out = Tensor::from_parts(t.dims().to_vec(), out);
        self.push(out, Op::Gelu { x, cdf })
    }
}

fn check_bias(tape: &Tape, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        let n = tape.value(b).len();
        if n != channels {
            return Err(Error::dim(op, "bias", format!("{n} biases for {channels} output channels")));
        }
    }
    Ok(())
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let bv = bias[i % bias.len()];
        for v in chunk {
            *v += bv;
        }
    }
}

fn channel_bias_grad(g: &[f64], channels: usize, plane: usize, db: &mut [f64]) {
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().sum::<f64>();
    }
}

/// Mutable gradient buffer for `v`, created zero-filled on first use.
/// Returns `None` when `v` does not participate in differentiation.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(node.value.dims()))
            .data_mut(),
    )
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: impl IntoIterator<Item = f64>) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (d, s) in buf.iter_mut().zip(g) {
            *d += s;
        }
    }
}

pub(super) fn backward_node(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    let gd = g.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, gd.iter().copied());
            accumulate(nodes, grads, *b, gd.iter().copied());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, gd.iter().copied());
            accumulate(nodes, grads, *b, gd.iter().map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y));
            accumulate(nodes, grads, *b, gd.iter().zip(va).map(|(g, x)| g * x));
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, gd.iter().map(|v| v * c)),
        Op::MulScalar(a, s) => {
            let c = val(*s).data()[0];
            accumulate(nodes, grads, *a, gd.iter().map(|v| v * c));
            let ds: f64 = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
            accumulate(nodes, grads, *s, [ds]);
        }
        Op::AddBias(a, bias) => {
            accumulate(nodes, grads, *a, gd.iter().copied());
            if let Some(db) = slot(nodes, grads, *bias) {
                let n = db.len();
                for row in gd.chunks(n) {
                    for (d, s) in db.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, std::iter::repeat_n(gd[0], n));
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, std::iter::repeat_n(gd[0] / n as f64, n));
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, gd.iter().copied()),
        Op::Permute(a, axes) => {
            let back = permute_data(g, &inverse_axes(axes));
            accumulate(nodes, grads, *a, back.into_data());
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(g.dims(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).dims()[*axis];
                if let Some(buf) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, s) in buf[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Pad2d { x, index } => {
            let plane = val(*x).dims()[2] * val(*x).dims()[3];
            if let Some(buf) = slot(nodes, grads, *x) {
                for (dst, src) in buf.chunks_mut(plane).zip(gd.chunks(index.len())) {
                    for (&k, &s) in index.iter().zip(src) {
                        if k != NO_SOURCE {
                            dst[k] += s;
                        }
                    }
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, n, inner) = split_axis(val(*x).dims(), *axis);
            let len = g.dims()[*axis];
            if let Some(buf) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut buf[(o * n + start) * inner..(o * n + start + len) * inner];
                    for (d, s) in dst.iter_mut().zip(&gd[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Matmul { a, b, m, k, n, batch } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, grads, *a) {
                match *batch {
                    MatmulBatch::BroadcastB(nb) => kernels::gemm(nb * m, n, k, gd, false, vb, true, da, true),
                    MatmulBatch::Paired(nb) => {
                        for j in 0..nb {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &gd[j * m * n..(j + 1) * m * n],
                                false,
                                &vb[j * k * n..(j + 1) * k * n],
                                true,
                                &mut da[j * m * k..(j + 1) * m * k],
                                true,
                            );
                        }
                    }
                    MatmulBatch::BroadcastA(nb) => {
                        for j in 0..nb {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &gd[j * m * n..(j + 1) * m * n],
                                false,
                                &vb[j * k * n..(j + 1) * k * n],
                                true,
                                da,
                                true,
                            );
                        }
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                match *batch {
                    MatmulBatch::BroadcastB(nb) => kernels::gemm(k, nb * m, n, va, true, gd, false, db, true),
                    MatmulBatch::Paired(nb) => {
                        for j in 0..nb {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &va[j * m * k..(j + 1) * m * k],
                                true,
                                &gd[j * m * n..(j + 1) * m * n],
                                false,
                                &mut db[j * k * n..(j + 1) * k * n],
                                true,
                            );
                        }
                    }
                    MatmulBatch::BroadcastA(nb) => {
                        for j in 0..nb {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                va,
                                true,
                                &gd[j * m * n..(j + 1) * m * n],
                                false,
                                &mut db[j * k * n..(j + 1) * k * n],
                                true,
                            );
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, bias, geom } => {
            let (xs, ws) = (val(*x).data(), val(*w).data());
            let b = val(*x).dims()[0];
            let co = val(*w).dims()[0];
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let in_len = geom.channels * geom.height * geom.width;
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut col = vec![0.0; rows * cols];
            if need_w {
                let dw = slot(nodes, grads, *w).unwrap();
                for n in 0..b {
                    kernels::im2col(&xs[n * in_len..(n + 1) * in_len], geom, &mut col);
                    kernels::gemm(co, cols, rows, &gd[n * co * cols..(n + 1) * co * cols], false, &col, true, dw, true);
                }
            }
            if need_x {
                let dx = slot(nodes, grads, *x).unwrap();
                for n in 0..b {
                    kernels::gemm(rows, co, cols, ws, true, &gd[n * co * cols..(n + 1) * co * cols], false, &mut col, false);
                    kernels::col2im(&col, geom, &mut dx[n * in_len..(n + 1) * in_len]);
                }
            }
            if let Some(bv) = bias {
                if let Some(db) = slot(nodes, grads, *bv) {
                    channel_bias_grad(gd, co, cols, db);
                }
            }
        }
        Op::ConvTranspose2d { x, w, bias, geom } => {
            let (xs, ws) = (val(*x).data(), val(*w).data());
            let (b, ci) = (val(*x).dims()[0], val(*x).dims()[1]);
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let out_len = geom.channels * geom.height * geom.width;
            let mut col = vec![0.0; rows * cols];
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            if need_w || need_x {
                for n in 0..b {
                    kernels::im2col(&gd[n * out_len..(n + 1) * out_len], geom, &mut col);
                    if let Some(dx) = slot(nodes, grads, *x) {
                        kernels::gemm(ci, rows, cols, ws, false, &col, false, &mut dx[n * ci * cols..(n + 1) * ci * cols], true);
                    }
                    if let Some(dw) = slot(nodes, grads, *w) {
                        kernels::gemm(ci, cols, rows, &xs[n * ci * cols..(n + 1) * ci * cols], false, &col, true, dw, true);
                    }
                }
            }
            if let Some(bv) = bias {
                if let Some(db) = slot(nodes, grads, *bv) {
                    channel_bias_grad(gd, geom.channels, geom.height * geom.width, db);
                }
            }
        }
        Op::Depthwise { x, w, bias, geom } => {
            let (xs, ws) = (val(*x).data(), val(*w).data());
            let b = val(*x).dims()[0];
            let c = geom.channels;
            let (in_len, out_len) = (c * geom.height * geom.width, c * geom.out_height * geom.out_width);
            let mut dx_local = nodes[x.0].requires_grad.then(|| vec![0.0; xs.len()]);
            let mut dw_local = nodes[w.0].requires_grad.then(|| vec![0.0; ws.len()]);
            for n in 0..b {
                kernels::depthwise_backward(
                    &xs[n * in_len..(n + 1) * in_len],
                    ws,
                    &gd[n * out_len..(n + 1) * out_len],
                    geom,
                    dx_local.as_mut().map(|d| &mut d[n * in_len..(n + 1) * in_len]),
                    dw_local.as_deref_mut(),
                );
            }
            if let Some(d) = dx_local {
                accumulate(nodes, grads, *x, d);
            }
            if let Some(d) = dw_local {
                accumulate(nodes, grads, *w, d);
            }
            if let Some(bv) = bias {
                if let Some(db) = slot(nodes, grads, *bv) {
                    channel_bias_grad(gd, c, geom.out_height * geom.out_width, db);
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = val(*gamma).len();
            let gm = val(*gamma).data();
            if nodes[x.0].requires_grad {
                let mut dx = Vec::with_capacity(gd.len());
                for ((grow, xrow), r) in gd.chunks(c).zip(xhat.chunks(c)).zip(rstd) {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let dxh = grow[j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * xrow[j];
                    }
                    let (m1, m2) = (s1 / c as f64, s2 / c as f64);
                    for j in 0..c {
                        dx.push(r * (grow[j] * gm[j] - m1 - xrow[j] * m2));
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (grow, xrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] += grow[j] * xrow[j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for grow in gd.chunks(c) {
                    for j in 0..c {
                        db[j] += grow[j];
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = nodes[i].value.data();
            let n = *g.dims().last().unwrap();
            let mut dx = Vec::with_capacity(y.len());
            for (grow, yrow) in gd.chunks(n).zip(y.chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                dx.extend(grow.iter().zip(yrow).map(|(gv, yv)| yv * (gv - dot)));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Gelu { x, cdf } => {
            let xs = val(*x).data();
            accumulate(nodes, grads, *x, gd.iter().zip(xs).zip(cdf).map(|((g, &v), &c)| g * gelu_grad(v, c)));
        }
        Op::Custom { inputs, backward } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            let gs = backward(g, &vals, &nodes[i].value);
            for (&v, gi) in inputs.iter().zip(gs) {
                accumulate(nodes, grads, v, gi.into_data());
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}
