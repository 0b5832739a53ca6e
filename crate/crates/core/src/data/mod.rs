//! Synthetic paired phantoms, image-domain low-dose noise and 16-bit PGM I/O.

mod dataset;
mod noise;
mod phantom;
pub mod pgm;

pub use dataset::{make_dataset, DatasetSpec, Manifest, ManifestEntry, Split, SplitFractions, MANIFEST_FILE, META_FILE};
pub use noise::{inject_lowdose_noise, NoiseModel, DEFAULT_I0};
pub use phantom::generate_phantom;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim("image", "H×W", format!("{height}×{width} with {} pixels", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    /// `1×1×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.height, self.width], self.data.clone())
    }

    /// Accepts any tensor holding exactly one `H×W` plane.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.dims();
        if d.len() < 2 || d[..d.len() - 2].iter().any(|&v| v != 1) {
            return Err(Error::dim("image", "shape", format!("expected a single plane, got {d:?}")));
        }
        Self::new(d[d.len() - 2], d[d.len() - 1], t.data().to_vec())
    }

    /// Stacks same-sized images into `B×1×H×W`.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("cannot batch zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.height, im.width) != (first.height, first.width) {
                return Err(Error::dim("batch", "H×W", "images differ in size"));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_parts(vec![images.len(), 1, first.height, first.width], data))
    }

    pub fn clamped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Snaps values to the 16-bit storage grid `k / 65535`.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| pgm::quantize(v) as f64 / pgm::MAXVAL).collect(),
        }
    }
}

/// A paired low-dose / full-dose example.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub clean: Image,
    pub noisy: Image,
    pub dose_fraction: f64,
}

/// Per-sample seed derived from the dataset seed and the sample id. Stable
/// across platforms and toolchains (FNV-1a over the id, then a splitmix64
/// finalizer).
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator streams for the phantom and its noise.
pub(crate) fn sample_rngs(sample_seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let phantom = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut noise = ChaCha8Rng::seed_from_u64(sample_seed);
    noise.set_stream(1);
    (phantom, noise)
}

/// Deterministic pair for `(seed, id)`: the clean image is snapped to the
/// storage grid before noise is drawn, so a pair reloaded from disk
/// regenerates the same noisy image.
pub fn synth_sample(id: &str, size: usize, dose_fraction: f64, noise: &NoiseModel, seed: u64) -> Result<ImageSample> {
    let (mut prng, mut nrng) = sample_rngs(sample_seed(seed, id));
    let clean = generate_phantom(size, &mut prng)?.quantized();
    let noisy = inject_lowdose_noise(&clean, dose_fraction, noise, &mut nrng)?;
    Ok(ImageSample {
        id: id.to_string(),
        clean,
        noisy,
        dose_fraction,
    })
}

/// Redraws the noisy half of the `(seed, id)` pair from its clean image.
pub fn regenerate_noisy(id: &str, clean: &Image, dose_fraction: f64, noise: &NoiseModel, seed: u64) -> Result<Image> {
    let (_, mut nrng) = sample_rngs(sample_seed(seed, id));
    inject_lowdose_noise(clean, dose_fraction, noise, &mut nrng)
}
