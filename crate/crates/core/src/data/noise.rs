use rand::Rng;
use rand_distr::{Distribution, Poisson};

use super::Image;
use crate::error::{Error, Result};

/// Full-dose photon count per unit intensity.
pub const DEFAULT_I0: f64 = 1e4;

/// Image-domain Poisson model: `counts ~ Poisson(y · I0 · dose)`,
/// `x = counts / (I0 · dose)`, clipped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub i0: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { i0: DEFAULT_I0 }
    }
}

pub fn inject_lowdose_noise<R: Rng + ?Sized>(
    clean: &Image,
    dose_fraction: f64,
    model: &NoiseModel,
    rng: &mut R,
) -> Result<Image> {
    if !(dose_fraction > 0.0 && dose_fraction <= 1.0) {
        return Err(Error::Validation(format!("dose fraction must be in (0, 1], got {dose_fraction}")));
    }
    if !(model.i0 > 0.0 && model.i0.is_finite()) {
        return Err(Error::Validation(format!("photon scale I0 must be positive, got {}", model.i0)));
    }
    let scale = model.i0 * dose_fraction;
    let mut out = Image::zeros(clean.height, clean.width);
    for (o, &y) in out.data.iter_mut().zip(&clean.data) {
        let lambda = y.max(0.0) * scale;
        *o = if lambda > 0.0 {
            let counts = Poisson::new(lambda)
                .map_err(|e| Error::Validation(format!("Poisson rate {lambda}: {e}")))?
                .sample(rng);
            (counts / scale).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    Ok(out)
}
