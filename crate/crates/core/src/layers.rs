//! Small parameterized building blocks shared by the network modules.

use rand::Rng;

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of transformer projection weights at init.
pub const PROJ_INIT_STD: f64 = 0.02;

/// Default fan-in uniform bound, `1/sqrt(fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `y = x · W + b` over the last axis; weights stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[inputs, outputs], PROJ_INIT_STD, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = fan_in_bound(inputs * kernel * kernel);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[outputs, inputs, kernel, kernel], bound, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[outputs], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            pad_mode: PadMode::Zeros,
        })
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), Some(p.var(self.bias)));
        if self.pad_mode == PadMode::Zeros || self.padding == 0 {
            return tape.conv2d(x, w, b, self.stride, self.padding);
        }
        let padded = tape.pad2d(x, self.padding, self.pad_mode)?;
        tape.conv2d(padded, w, b, self.stride, 0)
    }
}

/// Transposed convolution with bias; weights stored `in × out × K × K`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = fan_in_bound(outputs * kernel * kernel);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[inputs, outputs, kernel, kernel], bound, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[outputs], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.padding)
    }
}

/// Layer-norm gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}
