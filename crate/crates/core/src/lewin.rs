//! Locally-enhanced window (LeWin) transformer block.
//!
//! A feature map is tiled into non-overlapping `M×M` windows. Each window is
//! a sequence of `M²` tokens that goes through pre-norm residual pairs of
//! window self-attention and a feed-forward net with a depthwise 3×3 conv
//! over the window grid. Nothing crosses a window boundary.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{fan_in_bound, Linear, Norm};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Window side `M`, head count `j` and channel width `C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub heads: usize,
    pub channels: usize,
}

impl WindowSpec {
    pub fn new(window: usize, heads: usize, channels: usize) -> Result<Self> {
        if window == 0 || heads == 0 || channels == 0 {
            return Err(Error::Config("window, heads and channels must be positive".into()));
        }
        if !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels do not split evenly over {heads} heads"
            )));
        }
        Ok(Self {
            window,
            heads,
            channels,
        })
    }

    /// `d_j = C / j`.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Window count `N = HW / M²`; errors unless both sides divide by `M`.
    pub fn window_count(&self, height: usize, width: usize) -> Result<usize> {
        window_count(height, width, self.window)
    }
}

fn window_count(height: usize, width: usize, m: usize) -> Result<usize> {
    if !height.is_multiple_of(m) || !width.is_multiple_of(m) {
        return Err(Error::dim(
            "window_partition",
            "H/W",
            format!("{height}×{width} is not divisible by window {m}"),
        ));
    }
    Ok(height * width / (m * m))
}

const PARTITION_AXES: [usize; 6] = [0, 2, 4, 3, 5, 1];
const REVERSE_AXES: [usize; 6] = [0, 5, 1, 3, 2, 4];

/// `B×C×H×W → (B·N)×M²×C`, windows in row-major tile order.
pub fn window_partition(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let (b, c, h, w) = tape.value(x).bchw("window_partition")?;
    let n = window_count(h, w, m)?;
    let t = tape.reshape(x, &[b, c, h / m, m, w / m, m])?;
    let t = tape.permute(t, &PARTITION_AXES)?;
    tape.reshape(t, &[b * n, m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(tape: &mut Tape, windows: Var, height: usize, width: usize) -> Result<Var> {
    let dims = tape.dims(windows).to_vec();
    let [bn, tokens, c] = dims[..] else {
        return Err(Error::dim("window_reverse", "rank", format!("expected windows×M²×C, got {dims:?}")));
    };
    let m = (tokens as f64).sqrt().round() as usize;
    if m * m != tokens {
        return Err(Error::dim("window_reverse", "tokens", format!("{tokens} tokens is not a square window")));
    }
    let n = window_count(height, width, m)?;
    if bn % n != 0 {
        return Err(Error::dim(
            "window_reverse",
            "windows",
            format!("{bn} windows cannot tile a {height}×{width} map ({n} per image)"),
        ));
    }
    let b = bn / n;
    let t = tape.reshape(windows, &[b, height / m, width / m, m, m, c])?;
    let t = tape.permute(t, &REVERSE_AXES)?;
    tape.reshape(t, &[b, c, height, width])
}

/// Per-head Q/K/V projections plus the output projection.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub spec: WindowSpec,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub proj: Linear,
}

impl WindowAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: WindowSpec, rng: &mut R) -> Result<Self> {
        let (c, d) = (spec.channels, spec.head_dim());
        let mut mk = |kind: &str, rng: &mut R| -> Result<Vec<ParamId>> {
            (0..spec.heads)
                .map(|j| store.add(format!("{name}.{kind}.{j}"), Tensor::randn(&[c, d], crate::layers::PROJ_INIT_STD, rng)))
                .collect()
        };
        let wq = mk("wq", rng)?;
        let wk = mk("wk", rng)?;
        let wv = mk("wv", rng)?;
        let proj = Linear::new(store, &format!("{name}.proj"), c, c, true, rng)?;
        Ok(Self { spec, wq, wk, wv, proj })
    }

    /// Multi-head attention over `windows×M²×C` tokens.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_maps(tape, p, x)?.0)
    }

    /// Same as [`Self::forward`], also returning each head's
    /// `windows×M²×M²` attention weights.
    pub fn forward_with_maps(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let c = *tape.dims(x).last().unwrap();
        if c != self.spec.channels {
            return Err(Error::dim("wmsa", "C", format!("tokens have {c} channels, block expects {}", self.spec.channels)));
        }
        let scale = 1.0 / (self.spec.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.spec.heads);
        let mut maps = Vec::with_capacity(self.spec.heads);
        for j in 0..self.spec.heads {
            let q = tape.matmul(x, p.var(self.wq[j]))?;
            let k = tape.matmul(x, p.var(self.wk[j]))?;
            let v = tape.matmul(x, p.var(self.wv[j]))?;
            let kt = tape.transpose_last(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores);
            heads.push(tape.matmul(attn, v)?);
            maps.push(attn);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
        Ok((self.proj.forward(tape, p, cat)?, maps))
    }
}

/// Locally-enhanced feed-forward: linear → GeLU → depthwise 3×3 over the
/// window grid → GeLU → linear.
#[derive(Clone, Debug)]
pub struct Leff {
    pub lin_in: Linear,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub lin_out: Linear,
    pub hidden: usize,
}

impl Leff {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let lin_in = Linear::new(store, &format!("{name}.lin_in"), channels, hidden, true, rng)?;
        let dw_weight = store.add(
            format!("{name}.dw.weight"),
            Tensor::uniform(&[hidden, 1, 3, 3], fan_in_bound(9), rng),
        )?;
        let dw_bias = store.add(format!("{name}.dw.bias"), Tensor::zeros(&[hidden]))?;
        let lin_out = Linear::new(store, &format!("{name}.lin_out"), hidden, channels, true, rng)?;
        Ok(Self {
            lin_in,
            dw_weight,
            dw_bias,
            lin_out,
            hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let dims = tape.dims(x).to_vec();
        let [windows, tokens, _] = dims[..] else {
            return Err(Error::dim("leff", "rank", format!("expected windows×M²×C, got {dims:?}")));
        };
        let m = (tokens as f64).sqrt().round() as usize;
        if m * m != tokens {
            return Err(Error::dim("leff", "tokens", format!("{tokens} tokens do not form a square grid")));
        }
        let h = self.lin_in.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = tape.reshape(h, &[windows, m, m, self.hidden])?;
        let h = tape.permute(h, &[0, 3, 1, 2])?;
        let h = tape.depthwise_conv2d(h, p.var(self.dw_weight), Some(p.var(self.dw_bias)), 1, 1)?;
        let h = tape.gelu(h);
        let h = tape.permute(h, &[0, 2, 3, 1])?;
        let h = tape.reshape(h, &[windows, tokens, self.hidden])?;
        self.lin_out.forward(tape, p, h)
    }
}

/// One `X' = W-MSA(LN(X)) + X; X'' = LeFF(LN(X')) + X'` pair.
#[derive(Clone, Debug)]
pub struct LeWinLayer {
    pub norm1: Norm,
    pub attn: WindowAttention,
    pub norm2: Norm,
    pub leff: Leff,
}

impl LeWinLayer {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: Var) -> Result<Var> {
        let n = self.norm1.forward(tape, p, tokens)?;
        let a = self.attn.forward(tape, p, n)?;
        let x = tape.add(a, tokens)?;
        let n = self.norm2.forward(tape, p, x)?;
        let f = self.leff.forward(tape, p, n)?;
        tape.add(f, x)
    }
}

/// A stack of `depth` LeWin pairs applied to a `B×C×H×W` feature map.
#[derive(Clone, Debug)]
pub struct LeWinBlock {
    pub spec: WindowSpec,
    pub layers: Vec<LeWinLayer>,
}

impl LeWinBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: WindowSpec,
        depth: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                let prefix = format!("{name}.{i}");
                Ok(LeWinLayer {
                    norm1: Norm::new(store, &format!("{prefix}.norm1"), spec.channels)?,
                    attn: WindowAttention::new(store, &format!("{prefix}.attn"), spec, rng)?,
                    norm2: Norm::new(store, &format!("{prefix}.norm2"), spec.channels)?,
                    leff: Leff::new(store, &format!("{prefix}.leff"), spec.channels, hidden, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).bchw("lewin_forward")?;
        if c != self.spec.channels {
            return Err(Error::dim("lewin_forward", "C", format!("input has {c} channels, block expects {}", self.spec.channels)));
        }
        self.spec.window_count(h, w)?;
        let mut t = window_partition(tape, x, self.spec.window)?;
        for layer in &self.layers {
            t = layer.forward(tape, p, t)?;
        }
        window_reverse(tape, t, h, w)
    }
}
