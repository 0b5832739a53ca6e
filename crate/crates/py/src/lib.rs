//! Python bindings. Images cross the boundary as lists of rows of floats.

use std::path::PathBuf;

use eformer::data::{self, pgm, Image, ImageSample, NoiseModel};
use eformer::model::{self, Mode};
use eformer::optim::AdamConfig;
use eformer::train::{TrainConfig, Trainer};
use eformer::{checkpoint, gradsuite, metrics};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: eformer::Error) -> PyErr {
    match e {
        eformer::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Image> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty list of equal-length rows"));
    }
    Image::new(h, w, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows_from_image(img: &Image) -> Vec<Vec<f64>> {
    img.data.chunks(img.width).map(<[f64]>::to_vec).collect()
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (base_channels=32, stages=2, window=4, heads=2, lewin_depth=2, mode="residual", ffn_mult=4, unet_skips=false, per_kernel_alpha=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        base_channels: usize,
        stages: usize,
        window: usize,
        heads: usize,
        lewin_depth: usize,
        mode: &str,
        ffn_mult: usize,
        unet_skips: bool,
        per_kernel_alpha: bool,
    ) -> PyResult<Self> {
        let inner = model::ModelConfig {
            stages,
            base_channels,
            window,
            heads,
            lewin_depth,
            mode: mode.parse::<Mode>().map_err(to_py)?,
            ffn_mult,
            unet_skips,
            per_kernel_alpha,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn base_channels(&self) -> usize {
        self.inner.base_channels
    }
    #[getter]
    fn stages(&self) -> usize {
        self.inner.stages
    }
    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }
    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    /// Image sides must be multiples of this.
    fn size_multiple(&self) -> usize {
        self.inner.size_multiple()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Eformer")]
struct PyEformer {
    inner: model::Eformer,
}

#[pymethods]
impl PyEformer {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: model::Eformer::new(config.inner, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).map_err(to_py)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, None).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Raw network output: the residual `R(x)` or the direct estimate.
    fn predict(&self, image: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let img = image_from_rows(image)?;
        self.inner.config.check_input_size(img.height, img.width).map_err(to_py)?;
        let out = self.inner.predict(&img.to_tensor()).map_err(to_py)?;
        Ok(rows_from_image(&Image::from_tensor(&out).map_err(to_py)?))
    }

    /// Clean estimate; clamped to [0, 1] unless `clamp=False`.
    #[pyo3(signature = (image, clamp=true))]
    fn denoise(&self, image: Vec<Vec<f64>>, clamp: bool) -> PyResult<Vec<Vec<f64>>> {
        let img = image_from_rows(image)?;
        self.inner.config.check_input_size(img.height, img.width).map_err(to_py)?;
        let mut out = self.inner.denoise(&img.to_tensor()).map_err(to_py)?;
        if clamp {
            out = model::clamp_unit(&out);
        }
        Ok(rows_from_image(&Image::from_tensor(&out).map_err(to_py)?))
    }

    /// Trains in place on `(noisy, clean)` pairs; returns the per-step
    /// `L_final` values.
    #[pyo3(signature = (pairs, steps, lr=2e-5, batch_size=4, seed=0))]
    fn fit(
        &mut self,
        pairs: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
        steps: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let samples = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (noisy, clean))| {
                Ok(ImageSample {
                    id: format!("py_{i}"),
                    noisy: image_from_rows(noisy)?,
                    clean: image_from_rows(clean)?,
                    dose_fraction: 1.0,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            batch_size,
            steps,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::with_model(self.inner.clone(), cfg).map_err(to_py)?;
        trainer.run(&samples, None).map_err(to_py)?;
        self.inner = trainer.model;
        Ok(trainer.log.iter().map(|r| r.total).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (a, b, data_range=1.0))]
fn psnr(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, data_range: f64) -> PyResult<f64> {
    let (a, b) = (image_from_rows(a)?, image_from_rows(b)?);
    metrics::psnr(&a.data, &b.data, data_range).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, data_range=1.0))]
fn ssim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, data_range: f64) -> PyResult<f64> {
    let (a, b) = (image_from_rows(a)?, image_from_rows(b)?);
    if (a.height, a.width) != (b.height, b.width) {
        return Err(PyValueError::new_err("images differ in size"));
    }
    metrics::ssim(&a.data, &b.data, a.height, a.width, data_range).map_err(to_py)
}

#[pyfunction]
fn rmse(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let (a, b) = (image_from_rows(a)?, image_from_rows(b)?);
    metrics::rmse(&a.data, &b.data).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (size=64, seed=0))]
fn generate_phantom(size: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let img = data::generate_phantom(size, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
    Ok(rows_from_image(&img))
}

#[pyfunction]
#[pyo3(signature = (clean, dose_fraction=0.25, i0=data::DEFAULT_I0, seed=0))]
fn inject_lowdose_noise(clean: Vec<Vec<f64>>, dose_fraction: f64, i0: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let img = image_from_rows(clean)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = data::inject_lowdose_noise(&img, dose_fraction, &NoiseModel { i0 }, &mut rng).map_err(to_py)?;
    Ok(rows_from_image(&noisy))
}

/// `(clean, noisy)` pair for a sample id, identical to the dataset generator.
#[pyfunction]
#[pyo3(signature = (id, size=64, dose_fraction=0.25, i0=data::DEFAULT_I0, seed=0))]
fn synth_sample(id: &str, size: usize, dose_fraction: f64, i0: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let s = data::synth_sample(id, size, dose_fraction, &NoiseModel { i0 }, seed).map_err(to_py)?;
    Ok((rows_from_image(&s.clean), rows_from_image(&s.noisy)))
}

#[pyfunction]
fn load_pgm(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows_from_image(&pgm::load_image(&path).map_err(to_py)?))
}

#[pyfunction]
fn save_pgm(path: PathBuf, image: Vec<Vec<f64>>) -> PyResult<()> {
    pgm::save_image(&path, &image_from_rows(image)?).map_err(to_py)
}

/// Runs the finite-difference suite; returns the worst relative error.
#[pyfunction]
#[pyo3(signature = (seeds=20))]
fn gradcheck(seeds: u64) -> PyResult<f64> {
    Ok(gradsuite::run(seeds).map_err(to_py)?.max_error())
}

#[pymodule]
fn eformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyEformer>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(inject_lowdose_noise, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    m.add_function(wrap_pyfunction!(load_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(save_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("GRADCHECK_TOLERANCE", gradsuite::TOLERANCE)?;
    Ok(())
}
