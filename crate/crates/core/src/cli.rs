//! Command-line front end. `run` returns the process exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{make_dataset, pgm, DatasetSpec, Image, Manifest, NoiseModel, Split, SplitFractions, DEFAULT_I0};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::model::{clamp_unit, Eformer};
use crate::train::{evaluate, final_checkpoint_path, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "eformer", version, about = "Edge-enhanced transformer denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenData(GenData),
    /// Train a model from a config file on a dataset's train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Manifest file or dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise one PGM image.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    dose: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full-dose photon scale.
    #[arg(long, default_value_t = DEFAULT_I0)]
    i0: f64,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(crate::data::MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_model(ckpt: &Path) -> Result<Eformer> {
    Ok(checkpoint::load(ckpt)?.model)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(g) => {
            let spec = DatasetSpec {
                count: g.count,
                size: g.size,
                dose_fraction: g.dose,
                seed: g.seed,
                splits: SplitFractions {
                    train: g.train_frac,
                    val: g.val_frac,
                    test: g.test_frac,
                },
                noise: NoiseModel { i0: g.i0 },
            };
            let m = make_dataset(&spec, &g.out, g.force)?;
            println!("wrote {} samples to {}", m.entries.len(), g.out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let manifest = Manifest::load(&manifest_path(&data))?;
            let samples = manifest.load_split(Split::Train)?;
            if samples.is_empty() {
                return Err(Error::Validation("train split is empty".into()));
            }
            let mut trainer = Trainer::new(cfg.model, cfg.train)?;
            trainer.run(&samples, Some(&out))?;
            if let Some(last) = trainer.log.last() {
                println!("step {} l_final {:.6e}", last.step, last.total);
            }
            println!("checkpoint {}", final_checkpoint_path(&out).display());
        }
        Command::Denoise { ckpt, input, out } => {
            let model = load_model(&ckpt)?;
            let img = pgm::load_image(&input)?;
            model.config.check_input_size(img.height, img.width)?;
            let y = clamp_unit(&model.denoise(&img.to_tensor())?);
            pgm::save_image(&out, &Image::from_tensor(&y)?)?;
        }
        Command::Eval { ckpt, data, split, csv } => {
            let model = load_model(&ckpt)?;
            let manifest = Manifest::load(&manifest_path(&data))?;
            let samples = manifest.load_split(split)?;
            if samples.is_empty() {
                return Err(Error::Validation(format!("{} split is empty", split.as_str())));
            }
            let report = evaluate(&model, &samples)?;
            if let Some(path) = csv {
                std::fs::write(&path, report.csv()).map_err(|e| Error::io(&path, e))?;
            }
            println!("{}", report.summary());
        }
        Command::Gradcheck { seeds } => {
            let report = gradsuite::run(seeds)?;
            for c in &report.cases {
                println!("{:<42} {:.3e}", c.name, c.max_rel_error);
            }
            println!("max relative error {:.3e}", report.max_error());
            if !report.passed() {
                return Err(Error::Contract(format!(
                    "gradient suite exceeded tolerance {:e}",
                    gradsuite::TOLERANCE
                )));
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
