//! Flat `key = value` run configuration.
//!
//! Keys are the kebab-case names of [`ModelConfig`] and [`TrainConfig`]
//! fields. Blank lines and lines starting with `#` are ignored. Optional
//! values accept `none`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Model and training settings for one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "d-model",
    "num-heads",
    "num-layers",
    "d-ff",
    "dropout",
    "norm-placement",
    "residual-norm",
    "use-fixnorm",
    "attention-mode",
    "g-init",
    "g-percentile",
    "g-learnable",
    "per-head-g",
    "normalize-v",
    "tie-embeddings",
    "max-seq-len",
    "base-lr",
    "warmup-steps",
    "decay-factor",
    "patience",
    "min-lr",
    "max-epochs",
    "batch-size",
    "seed",
    "checkpoint",
    "label-smoothing",
    "clip-norm",
    "eval-batch-size",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Sets one field. Underscores in `key` are treated as dashes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        let k = key.as_str();
        match k {
            "d-model" => m.d_model = parse(k, value)?,
            "num-heads" => m.num_heads = parse(k, value)?,
            "num-layers" => m.num_layers = parse(k, value)?,
            "d-ff" => m.d_ff = parse(k, value)?,
            "dropout" => m.dropout = parse(k, value)?,
            "norm-placement" => m.norm_placement = value.parse()?,
            "residual-norm" => m.residual_norm = value.parse()?,
            "use-fixnorm" => m.use_fixnorm = parse_bool(k, value)?,
            "attention-mode" => m.attention_mode = value.parse()?,
            "g-init" => m.g_init = parse_opt(k, value)?,
            "g-percentile" => {
                m.g_percentile = if value.eq_ignore_ascii_case("max") { 100.0 } else { parse(k, value)? }
            }
            "g-learnable" => m.g_learnable = parse_bool(k, value)?,
            "per-head-g" => m.per_head_g = parse_bool(k, value)?,
            "normalize-v" => m.normalize_v = parse_bool(k, value)?,
            "tie-embeddings" => m.tie_embeddings = parse_bool(k, value)?,
            "max-seq-len" => m.max_seq_len = parse(k, value)?,
            "base-lr" => t.base_lr = parse(k, value)?,
            "warmup-steps" => t.warmup_steps = parse(k, value)?,
            "decay-factor" => t.decay_factor = parse(k, value)?,
            "patience" => t.patience = parse(k, value)?,
            "min-lr" => t.min_lr = parse(k, value)?,
            "max-epochs" => t.max_epochs = parse(k, value)?,
            "batch-size" => t.batch_size = parse(k, value)?,
            "seed" => t.seed = parse(k, value)?,
            "checkpoint" => t.checkpoint = parse_opt::<PathBuf>(k, value)?,
            "label-smoothing" => t.label_smoothing = parse(k, value)?,
            "clip-norm" => t.clip_norm = parse_opt(k, value)?,
            "eval-batch-size" => t.eval_batch_size = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines in order.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}
