//! `key = value` run configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "stages",
    "base_channels",
    "window",
    "heads",
    "lewin_depth",
    "mode",
    "ffn_mult",
    "unet_skips",
    "per_kernel_alpha",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "steps",
    "seed",
    "lambda_mse",
    "lambda_msp",
    "checkpoint_every",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let lineno = n + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key=value, got {raw:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {lineno}: duplicate key {key:?}")));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {lineno}: {}", strip(e))))?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "stages" => m.stages = num(key, value)?,
            "base_channels" => m.base_channels = num(key, value)?,
            "window" => m.window = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "lewin_depth" => m.lewin_depth = num(key, value)?,
            "mode" => m.mode = value.parse()?,
            "ffn_mult" => m.ffn_mult = num(key, value)?,
            "unet_skips" => m.unet_skips = boolean(key, value)?,
            "per_kernel_alpha" => m.per_kernel_alpha = boolean(key, value)?,
            "lr" => t.adam.lr = num(key, value)?,
            "beta1" => t.adam.beta1 = num(key, value)?,
            "beta2" => t.adam.beta2 = num(key, value)?,
            "eps" => t.adam.eps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "lambda_mse" => t.weights.lambda_mse = num(key, value)?,
            "lambda_msp" => t.weights.lambda_msp = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?} (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        format!(
            "stages={}\nbase_channels={}\nwindow={}\nheads={}\nlewin_depth={}\nmode={}\nffn_mult={}\n\
             unet_skips={}\nper_kernel_alpha={}\nlr={}\nbeta1={}\nbeta2={}\neps={}\nbatch_size={}\n\
             steps={}\nseed={}\nlambda_mse={}\nlambda_msp={}\ncheckpoint_every={}\n",
            m.stages,
            m.base_channels,
            m.window,
            m.heads,
            m.lewin_depth,
            m.mode,
            m.ffn_mult,
            m.unet_skips,
            m.per_kernel_alpha,
            t.adam.lr,
            t.adam.beta1,
            t.adam.beta2,
            t.adam.eps,
            t.batch_size,
            t.steps,
            t.seed,
            t.weights.lambda_mse,
            t.weights.lambda_msp,
            t.checkpoint_every
        )
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(s) => s,
        other => other.to_string(),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn parses_and_round_trips() {
        let c = RunConfig::parse("# desk run\nbase_channels = 16\nmode=deterministic\nlr=1e-4\n\nsteps=10 # short\n").unwrap();
        assert_eq!(c.model.base_channels, 16);
        assert_eq!(c.model.mode, Mode::Deterministic);
        assert_eq!(c.train.adam.lr, 1e-4);
        assert_eq!(c.train.steps, 10);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_lines() {
        for bad in ["colour=blue", "steps", "steps=1\nsteps=2", "lr=-1", "mode=fast", "unet_skips=yes", "steps=0"] {
            let err = RunConfig::parse(bad).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
        assert!(RunConfig::parse("colour=blue").unwrap_err().to_string().contains("line 1: unknown key"));
    }
}
