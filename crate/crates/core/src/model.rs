//! The full encoder/decoder denoiser.
//!
//! Edge maps `S(I)` are computed once at full resolution and shared with every
//! stage: each encoder stage concatenates them after its LeWin block, each
//! decoder stage after its upsampling. Between levels they shrink with a
//! fixed strided 3×3 average.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{PadMode, Tape, Var};
use crate::edge::{SobelKernelSet, DEFAULT_ALPHA, EDGE_CHANNELS};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvTranspose};
use crate::lewin::{LeWinBlock, WindowSpec};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// What the output projection predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Predicts the noise `R(x)`; the clean estimate is `x − R(x)`.
    Residual,
    /// Predicts the clean image directly.
    Deterministic,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Residual => "residual",
            Mode::Deterministic => "deterministic",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Mode::Residual),
            "deterministic" => Ok(Mode::Deterministic),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected residual or deterministic"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub window: usize,
    pub heads: usize,
    pub lewin_depth: usize,
    pub mode: Mode,
    /// LeFF hidden width as a multiple of the stage width.
    pub ffn_mult: usize,
    /// Also concatenate the encoder stage output into the matching decoder.
    pub unet_skips: bool,
    /// One `α` per Sobel template instead of a shared scalar.
    pub per_kernel_alpha: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            base_channels: 32,
            window: 4,
            heads: 2,
            lewin_depth: 2,
            mode: Mode::Residual,
            ffn_mult: 4,
            unet_skips: false,
            per_kernel_alpha: false,
        }
    }
}

/// Feature-map geometry at one resolution level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Level {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `N = HW / M²`.
    pub windows: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stages", self.stages),
            ("base_channels", self.base_channels),
            ("window", self.window),
            ("heads", self.heads),
            ("lewin_depth", self.lewin_depth),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.stages > 8 {
            return Err(Error::Config(format!("{} stages is more than supported (8)", self.stages)));
        }
        for s in 0..=self.stages {
            let c = self.channels_at(s);
            if !c.is_multiple_of(self.heads) {
                return Err(Error::Config(format!(
                    "stage {s} width {c} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// `C · 2^s`.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.window << self.stages
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let q = self.size_multiple();
        if height.is_multiple_of(q) && width.is_multiple_of(q) && height > 0 && width > 0 {
            return Ok(());
        }
        let near = |v: usize| {
            let lo = (v / q) * q;
            let mut opts = vec![];
            if lo > 0 {
                opts.push(lo.to_string());
            }
            opts.push((lo + q).to_string());
            opts.join(" or ")
        };
        Err(Error::Config(format!(
            "input {height}×{width} does not fit window {} with {} stages: sides must be multiples of {q} \
             (valid sizes: {q}, {}, {}, ...; nearest height {}, nearest width {})",
            self.window,
            self.stages,
            2 * q,
            3 * q,
            near(height),
            near(width),
        )))
    }

    /// Geometry for levels `0..=stages`; the decoder walks it in reverse.
    pub fn pyramid(&self, height: usize, width: usize) -> Result<Vec<Level>> {
        self.check_input_size(height, width)?;
        Ok((0..=self.stages)
            .map(|s| {
                let (h, w) = (height >> s, width >> s);
                Level {
                    channels: self.channels_at(s),
                    height: h,
                    width: w,
                    windows: h * w / (self.window * self.window),
                }
            })
            .collect())
    }

    fn spec_at(&self, level: usize) -> Result<WindowSpec> {
        WindowSpec::new(self.window, self.heads, self.channels_at(level))
    }
}

/// Reflect-padded 3×3 convolution; zero padding would hand every stage a
/// hard image border to undo.
fn conv3x3(
    store: &mut ParamStore,
    name: &str,
    inputs: usize,
    outputs: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Conv> {
    Ok(Conv::new(store, name, inputs, outputs, 3, stride, 1, rng)?.with_pad_mode(PadMode::Reflect))
}

/// Two 3×3 convolutions, each followed by GeLU.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub first: Conv,
    pub second: Conv,
}

impl ConvStack {
    fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            first: conv3x3(store, &format!("{name}.0"), inputs, outputs, 1, rng)?,
            second: conv3x3(store, &format!("{name}.1"), outputs, outputs, 1, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = self.second.forward(tape, p, h)?;
        Ok(tape.gelu(h))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub lewin: LeWinBlock,
    pub conv: ConvStack,
    pub down: Conv,
}

/// Output of one encoder stage.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub down: Var,
    /// Stage record `u` at the stage's own resolution.
    pub skip: Var,
}

impl EncoderStage {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f: Var, edges: Var) -> Result<EncoderOutput> {
        let t = self.lewin.forward(tape, p, f)?;
        let cat = concat_matching(tape, "encoder_stage", t, edges)?;
        let u = self.conv.forward(tape, p, cat)?;
        let down = self.down.forward(tape, p, u)?;
        Ok(EncoderOutput { down, skip: u })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose,
    pub conv: ConvStack,
    pub lewin: LeWinBlock,
}

impl DecoderStage {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f: Var, edges: Var, skip: Option<Var>) -> Result<Var> {
        let g = self.up.forward(tape, p, f)?;
        let g = match skip {
            Some(u) => concat_matching(tape, "decoder_stage", g, u)?,
            None => g,
        };
        let cat = concat_matching(tape, "decoder_stage", g, edges)?;
        let h = self.conv.forward(tape, p, cat)?;
        self.lewin.forward(tape, p, h)
    }
}

fn concat_matching(tape: &mut Tape, op: &'static str, a: Var, b: Var) -> Result<Var> {
    let (da, db) = (tape.dims(a), tape.dims(b));
    if da.len() != 4 || db.len() != 4 || da[0] != db[0] || da[2..] != db[2..] {
        return Err(Error::dim(op, "B/H/W", format!("cannot concatenate {da:?} with {db:?}")));
    }
    tape.concat_channels(a, b)
}

/// Fixed strided 3×3 mean over each edge channel (reflect-padded).
pub fn downsample_edges(tape: &mut Tape, edges: Var) -> Result<Var> {
    let c = tape.dims(edges)[1];
    let w = tape.constant(Tensor::full(&[c, 1, 3, 3], 1.0 / 9.0));
    let padded = tape.pad2d(edges, 1, PadMode::Reflect)?;
    tape.depthwise_conv2d(padded, w, None, 2, 0)
}

/// The network and its parameters.
#[derive(Clone, Debug)]
pub struct Eformer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub edge: SobelKernelSet,
    pub input_proj: Conv,
    pub encoders: Vec<EncoderStage>,
    pub bottleneck: LeWinBlock,
    /// Indexed by resolution level; applied deepest first.
    pub decoders: Vec<DecoderStage>,
    pub output_proj: Conv,
}

impl Eformer {
    /// Builds a freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let e = EDGE_CHANNELS;

        let edge = SobelKernelSet::new(&mut store, "edge.alpha", config.per_kernel_alpha, DEFAULT_ALPHA)?;
        let input_proj = conv3x3(&mut store, "input_proj", 1, c, 1, &mut rng)?;

        let mut encoders = Vec::with_capacity(config.stages);
        for s in 0..config.stages {
            let cs = config.channels_at(s);
            let name = format!("enc.{s}");
            encoders.push(EncoderStage {
                lewin: lewin_block(&mut store, &format!("{name}.lewin"), &config, s, &mut rng)?,
                conv: ConvStack::new(&mut store, &format!("{name}.conv"), cs + e, cs, &mut rng)?,
                down: conv3x3(&mut store, &format!("{name}.down"), cs, 2 * cs, 2, &mut rng)?,
            });
        }
        let bottleneck = lewin_block(&mut store, "bottleneck", &config, config.stages, &mut rng)?;

        let mut decoders: Vec<Option<DecoderStage>> = vec![None; config.stages];
        for s in (0..config.stages).rev() {
            let cs = config.channels_at(s);
            let name = format!("dec.{s}");
            let skip = if config.unet_skips { cs } else { 0 };
            decoders[s] = Some(DecoderStage {
                up: ConvTranspose::new(&mut store, &format!("{name}.up"), 2 * cs, cs, 4, 2, 1, &mut rng)?,
                conv: ConvStack::new(&mut store, &format!("{name}.conv"), cs + skip + e, cs, &mut rng)?,
                lewin: lewin_block(&mut store, &format!("{name}.lewin"), &config, s, &mut rng)?,
            });
        }
        let output_proj = conv3x3(&mut store, "output_proj", c, 1, 1, &mut rng)?;

        Ok(Self {
            config,
            params: store,
            edge,
            input_proj,
            encoders,
            bottleneck,
            decoders: decoders.into_iter().map(Option::unwrap).collect(),
            output_proj,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// `R(x)` in residual mode, `F(x)` in deterministic mode.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).bchw("forward")?;
        if c != 1 {
            return Err(Error::dim("forward", "C", format!("expected a single-channel image, got {c} channels")));
        }
        let levels = self.config.pyramid(h, w)?;
        warn_if_out_of_range(tape.value(x));

        let mut edges = vec![self.edge.forward(tape, p, x)?];
        for _ in 0..self.config.stages {
            let next = downsample_edges(tape, *edges.last().unwrap())?;
            edges.push(next);
        }

        let f = self.input_proj.forward(tape, p, x)?;
        let mut f = tape.gelu(f);
        expect_level(tape, f, &levels[0], "input_proj")?;

        let mut skips = Vec::with_capacity(self.config.stages);
        for (s, stage) in self.encoders.iter().enumerate() {
            let out = stage.forward(tape, p, f, edges[s])?;
            expect_level(tape, out.skip, &levels[s], "encoder")?;
            expect_level(tape, out.down, &levels[s + 1], "downsample")?;
            skips.push(out.skip);
            f = out.down;
        }

        f = self.bottleneck.forward(tape, p, f)?;

        for s in (0..self.config.stages).rev() {
            let skip = self.config.unet_skips.then(|| skips[s]);
            f = self.decoders[s].forward(tape, p, f, edges[s], skip)?;
            expect_level(tape, f, &levels[s], "decoder")?;
        }

        self.output_proj.forward(tape, p, f)
    }

    /// Clean estimate `ŷ` on the tape, unclamped.
    pub fn estimate(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let out = self.forward(tape, p, x)?;
        match self.config.mode {
            Mode::Residual => tape.sub(x, out),
            Mode::Deterministic => Ok(out),
        }
    }

    /// Raw network output for a batch, without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(out).clone())
    }

    /// `ŷ = x − R(x)` (residual) or `F(x)` (deterministic), unclamped.
    pub fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.predict(x)?;
        Ok(match self.config.mode {
            Mode::Residual => {
                Tensor::from_parts(x.dims().to_vec(), x.data().iter().zip(out.data()).map(|(a, r)| a - r).collect())
            }
            Mode::Deterministic => out,
        })
    }
}

fn lewin_block(
    store: &mut ParamStore,
    name: &str,
    config: &ModelConfig,
    level: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LeWinBlock> {
    let spec = config.spec_at(level)?;
    LeWinBlock::new(store, name, spec, config.lewin_depth, config.ffn_mult * spec.channels, rng)
}

fn expect_level(tape: &Tape, v: Var, level: &Level, at: &'static str) -> Result<()> {
    let d = tape.dims(v);
    if d[1..] != [level.channels, level.height, level.width] {
        return Err(Error::dim(
            at,
            "C/H/W",
            format!("expected {}×{}×{}, got {:?}", level.channels, level.height, level.width, &d[1..]),
        ));
    }
    Ok(())
}

fn warn_if_out_of_range(x: &Tensor) {
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        log::warn!("input image has values outside [0, 1]");
    }
}

/// Clamps to `[0, 1]` for export.
pub fn clamp_unit(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}
