//! Training objective: pixel MSE plus a multi-scale perceptual term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_msp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_msp: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_mse: f64, lambda_msp: f64) -> Result<Self> {
        let w = Self { lambda_mse, lambda_msp };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_mse", self.lambda_mse), ("lambda_msp", self.lambda_msp)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_mse == 0.0 && self.lambda_msp == 0.0 {
            return Err(Error::Config("lambda_mse and lambda_msp cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Source of the per-stage feature maps compared by the perceptual term.
pub trait FeatureTaps {
    /// One feature map per stage for a `B×1×H×W` image.
    fn taps(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>>;
}

/// Seed of the stock extractor weights.
pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

/// Output channels of the four extractor stages.
pub const EXTRACTOR_CHANNELS: [usize; 4] = [16, 32, 64, 128];

/// Four frozen stride-2 3×3 conv + GeLU stages with He-normal weights drawn
/// from a fixed seed. The weights enter the tape as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    weights: Vec<Tensor>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::with_seed(EXTRACTOR_SEED)
    }
}

impl FeatureExtractor {
    pub fn with_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = 1;
        let weights = EXTRACTOR_CHANNELS
            .iter()
            .map(|&out| {
                let fan_in = inputs * 9;
                let w = Tensor::randn(&[out, inputs, 3, 3], (2.0 / fan_in as f64).sqrt(), &mut rng);
                inputs = out;
                w
            })
            .collect();
        Self { weights }
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Runs the stages with caller-supplied weight handles (e.g. leaves that
    /// do not require gradients).
    pub fn taps_with(&self, tape: &mut Tape, weights: &[Var], image: Var) -> Result<Vec<Var>> {
        let c = tape.dims(image).get(1).copied().unwrap_or(0);
        if tape.dims(image).len() != 4 || c != 1 {
            return Err(Error::dim("msp_loss", "C", format!("expected B×1×H×W, got {:?}", tape.dims(image))));
        }
        let mut h = image;
        let mut out = Vec::with_capacity(weights.len());
        for &w in weights {
            let z = tape.conv2d(h, w, None, 2, 1)?;
            h = tape.gelu(z);
            out.push(h);
        }
        Ok(out)
    }
}

impl FeatureTaps for FeatureExtractor {
    fn taps(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let ws: Vec<Var> = self.weights.iter().map(|w| tape.constant(w.clone())).collect();
        self.taps_with(tape, &ws, image)
    }
}

fn same_dims(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.dims(a) != tape.dims(b) {
        return Err(Error::dim(op, "shape", format!("{:?} vs {:?}", tape.dims(a), tape.dims(b))));
    }
    Ok(())
}

/// Mean squared difference over every element.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_dims(tape, "mse_loss", pred, target)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Average over stages of the per-element mean squared feature distance.
pub fn msp_loss(tape: &mut Tape, pred: Var, target: Var, ex: &dyn FeatureTaps) -> Result<Var> {
    same_dims(tape, "msp_loss", pred, target)?;
    let fp = ex.taps(tape, pred)?;
    let ft = ex.taps(tape, target)?;
    if fp.is_empty() {
        return Err(Error::Contract("feature extractor produced no taps".into()));
    }
    let stages = fp.len() as f64;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        let m = mse_loss(tape, a, b)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / stages))
}

/// Handles to the two components and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mse: Var,
    pub msp: Var,
    pub total: Var,
}

pub fn final_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    w: &LossWeights,
    ex: &dyn FeatureTaps,
) -> Result<LossTerms> {
    let mse = mse_loss(tape, pred, target)?;
    let msp = msp_loss(tape, pred, target, ex)?;
    let a = tape.scale(mse, w.lambda_mse);
    let b = tape.scale(msp, w.lambda_msp);
    let total = tape.add(a, b)?;
    Ok(LossTerms { mse, msp, total })
}
