//! Training loop, loss log and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::{Image, ImageSample};
use crate::error::{Error, Result};
use crate::loss::{final_loss, FeatureExtractor, LossWeights};
use crate::metrics;
use crate::model::{Eformer, ModelConfig};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.weights.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub mse: f64,
    pub msp: f64,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "step\tl_mse\tl_msp\tl_final";

pub fn loss_log_tsv(log: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for r in log {
        s.push_str(&format!("{}\t{:e}\t{:e}\t{:e}\n", r.step, r.mse, r.msp, r.total));
    }
    s
}

/// Owns the model, optimizer and frozen extractor across steps.
pub struct Trainer {
    pub model: Eformer,
    pub adam: Adam,
    pub config: TrainConfig,
    pub extractor: FeatureExtractor,
    pub log: Vec<LossRecord>,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Eformer::new(model, config.seed)?;
        Self::with_model(model, config)
    }

    pub fn with_model(model: Eformer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, &model.params)?;
        Ok(Self {
            model,
            adam,
            config,
            extractor: FeatureExtractor::default(),
            log: Vec::new(),
        })
    }

    /// Loss of the current model on a batch without updating it.
    pub fn loss(&self, noisy: &[&Image], clean: &[&Image]) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape);
        let x = tape.constant(Image::batch(noisy)?);
        let y = tape.constant(Image::batch(clean)?);
        let pred = self.model.estimate(&mut tape, &p, x)?;
        let terms = final_loss(&mut tape, pred, y, &self.config.weights, &self.extractor)?;
        let v = |t: crate::Var| tape.value(t).data()[0];
        Ok(LossRecord {
            step: self.adam.step as usize,
            mse: v(terms.mse),
            msp: v(terms.msp),
            total: v(terms.total),
        })
    }

    /// Forward, backward and one Adam update. `last_good` names the
    /// checkpoint to report if the loss turns non-finite.
    pub fn step(&mut self, noisy: &[&Image], clean: &[&Image], last_good: &str) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape);
        let x = tape.constant(Image::batch(noisy)?);
        let y = tape.constant(Image::batch(clean)?);
        let pred = self.model.estimate(&mut tape, &p, x)?;
        let terms = final_loss(&mut tape, pred, y, &self.config.weights, &self.extractor)?;
        let v = |t: crate::Var| tape.value(t).data()[0];
        let record = LossRecord {
            step: self.adam.step as usize,
            mse: v(terms.mse),
            msp: v(terms.msp),
            total: v(terms.total),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite {
                step: record.step,
                last_good: last_good.to_string(),
            });
        }
        let grads = tape.backward(terms.total)?;
        let g = p.collect_grads(&grads);
        drop(tape);
        self.adam.update(&mut self.model.params, &g)?;
        self.log.push(record);
        Ok(record)
    }

    /// Runs `config.steps` updates over `samples` in seeded reshuffled
    /// passes. With `out`, writes `loss.tsv`, periodic `step_<n>.efmr` and
    /// `final.efmr`.
    pub fn run(&mut self, samples: &[ImageSample], out: Option<&Path>) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Validation("no training samples".into()));
        }
        let (h, w) = (samples[0].clean.height, samples[0].clean.width);
        self.model.config.check_input_size(h, w)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        order_rng.set_stream(7);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut last_good = String::from("none");
        let mut log_file = match out {
            Some(dir) => {
                let path = dir.join("loss.tsv");
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        for _ in 0..self.config.steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size {
                if cursor == order.len() {
                    order = (0..samples.len()).collect();
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                batch.push(&samples[order[cursor]]);
                cursor += 1;
            }
            let noisy: Vec<&Image> = batch.iter().map(|s| &s.noisy).collect();
            let clean: Vec<&Image> = batch.iter().map(|s| &s.clean).collect();
            let rec = self.step(&noisy, &clean, &last_good)?;
            log::debug!("step {} l_final {:.6e}", rec.step, rec.total);
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}\t{:e}\t{:e}\t{:e}", rec.step, rec.mse, rec.msp, rec.total)
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            let done = self.adam.step as usize;
            if let (Some(dir), true) = (out, self.config.checkpoint_every > 0) {
                if done.is_multiple_of(self.config.checkpoint_every) {
                    let p = dir.join(format!("step_{done}.efmr"));
                    checkpoint::save(&p, &self.model, Some(&self.adam))?;
                    last_good = p.display().to_string();
                }
            }
        }
        if let Some(dir) = out {
            checkpoint::save(&dir.join("final.efmr"), &self.model, Some(&self.adam))?;
        }
        Ok(())
    }
}

/// Per-image metrics of the denoised output and of the noisy input.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub baseline_rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }
    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }
    pub fn mean_rmse(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.rmse))
    }
    pub fn mean_baseline_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.baseline_psnr))
    }
    pub fn mean_baseline_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.baseline_ssim))
    }
    pub fn mean_baseline_rmse(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.baseline_rmse))
    }

    /// `id,psnr_db,ssim,rmse`, one row per image.
    pub fn csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim,rmse\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.id, r.psnr, r.ssim, r.rmse));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "images {}\nmean psnr_db {:.4} (baseline {:.4}, uplift {:+.4})\nmean ssim {:.4} (baseline {:.4})\nmean rmse {:.6} (baseline {:.6})",
            self.rows.len(),
            self.mean_psnr(),
            self.mean_baseline_psnr(),
            self.mean_psnr() - self.mean_baseline_psnr(),
            self.mean_ssim(),
            self.mean_baseline_ssim(),
            self.mean_rmse(),
            self.mean_baseline_rmse()
        )
    }
}

/// Denoises each sample and scores the clamped estimate against the clean
/// image (data range 1).
pub fn evaluate(model: &Eformer, samples: &[ImageSample]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        model.config.check_input_size(s.noisy.height, s.noisy.width)?;
        let y = model.denoise(&s.noisy.to_tensor())?;
        let y = Image::from_tensor(&y)?.clamped();
        let (h, w) = (s.clean.height, s.clean.width);
        let (c, x) = (&s.clean.data, &s.noisy.data);
        rows.push(EvalRow {
            id: s.id.clone(),
            psnr: metrics::psnr(&y.data, c, 1.0)?,
            ssim: metrics::ssim(&y.data, c, h, w, 1.0)?,
            rmse: metrics::rmse(&y.data, c)?,
            baseline_psnr: metrics::psnr(x, c, 1.0)?,
            baseline_ssim: metrics::ssim(x, c, h, w, 1.0)?,
            baseline_rmse: metrics::rmse(x, c)?,
        });
    }
    Ok(EvalReport { rows })
}

pub fn final_checkpoint_path(out: &Path) -> PathBuf {
    out.join("final.efmr")
}
