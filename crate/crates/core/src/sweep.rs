//! Head-count, length-percentile and ablation sweeps.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::AttentionKind;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NormPlacement, ResidualNorm};
use crate::train::{run, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Heads,
    Percentile,
    Ablation,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Heads => "heads",
            SweepKind::Percentile => "percentile",
            SweepKind::Ablation => "ablation",
        })
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(SweepKind::Heads),
            "percentile" => Ok(SweepKind::Percentile),
            "ablation" => Ok(SweepKind::Ablation),
            other => Err(Error::Config(format!("unknown sweep `{other}`"))),
        }
    }
}

pub const HEADS: [usize; 5] = [2, 4, 8, 16, 32];

/// Percentile settings; `None` is the maximum length.
pub const PERCENTILES: [Option<f64>; 7] = [Some(75.0), Some(90.0), Some(92.5), Some(95.0), Some(97.5), Some(99.0), None];

pub const ABLATIONS: [&str; 5] = [
    "without_g",
    "without_layernorm",
    "without_fixnorm",
    "without_fixnorm_or_prenorm",
    "l2_normalize_v",
];

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

/// Variants of `kind` derived from `base`, in table order.
pub fn variants(kind: SweepKind, base: &ModelConfig) -> Vec<Variant> {
    let v = |name: String, model: ModelConfig| Variant { name, model };
    match kind {
        SweepKind::Heads => HEADS
            .iter()
            .map(|&h| v(h.to_string(), ModelConfig { num_heads: h, ..base.clone() }))
            .collect(),
        SweepKind::Percentile => PERCENTILES
            .iter()
            .map(|p| {
                let (name, pct) = match p {
                    Some(p) => (p.to_string(), *p),
                    None => ("max".to_string(), 100.0),
                };
                v(
                    name,
                    ModelConfig {
                        attention_mode: AttentionKind::QkNorm,
                        g_init: None,
                        g_percentile: pct,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        SweepKind::Ablation => {
            let qk = ModelConfig {
                attention_mode: AttentionKind::QkNorm,
                ..base.clone()
            };
            ABLATIONS
                .iter()
                .map(|&name| {
                    let mut m = qk.clone();
                    match name {
                        "without_g" => {
                            m.g_init = Some(1.0);
                            m.g_learnable = false;
                        }
                        "without_layernorm" => m.residual_norm = ResidualNorm::ScaleNorm,
                        "without_fixnorm" => m.use_fixnorm = false,
                        "without_fixnorm_or_prenorm" => {
                            m.use_fixnorm = false;
                            m.norm_placement = NormPlacement::PostNorm;
                        }
                        "l2_normalize_v" => m.normalize_v = true,
                        _ => unreachable!(),
                    }
                    v(name.to_string(), m)
                })
                .collect()
        }
    }
}

/// Finished or failed variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Finished {
        test_bleu: f64,
        dev_bleu: f64,
        mean_entropy: f64,
        g_init: Option<f64>,
    },
    Failed(String),
}

pub const FAILED: &str = "FAILED";

/// Runs every variant; a failing variant becomes a [`Outcome::Failed`] row
/// and the sweep continues.
pub fn run_sweep(kind: SweepKind, base: &ModelConfig, train: &TrainConfig, corpus: &Corpus) -> Vec<SweepRow> {
    run_variants(&variants(kind, base), train, corpus)
}

pub fn run_variants(variants: &[Variant], train: &TrainConfig, corpus: &Corpus) -> Vec<SweepRow> {
    variants
        .iter()
        .map(|v| {
            let outcome = match run(&v.model, train, corpus) {
                Ok(r) => Outcome::Finished {
                    test_bleu: r.test.bleu.bleu,
                    dev_bleu: r.log.epochs.last().map_or(f64::NAN, |e| e.dev_bleu),
                    mean_entropy: r.entropy.mean,
                    g_init: r.model.config().g_init,
                },
                Err(e) => Outcome::Failed(e.to_string()),
            };
            SweepRow {
                variant: v.name.clone(),
                outcome,
            }
        })
        .collect()
}

/// Tab-separated table with a header; failed rows carry [`FAILED`] in the
/// status column and the error in `detail`.
pub fn to_tsv(kind: SweepKind, rows: &[SweepRow]) -> String {
    let mut out = format!("{kind}\tstatus\ttest_bleu\tdev_bleu\tmean_entropy\tg_init\tdetail\n");
    for r in rows {
        match &r.outcome {
            Outcome::Finished {
                test_bleu,
                dev_bleu,
                mean_entropy,
                g_init,
            } => {
                let g = g_init.map_or("-".to_string(), |g| format!("{g:.6}"));
                out.push_str(&format!(
                    "{}\tok\t{test_bleu:.4}\t{dev_bleu:.4}\t{mean_entropy:.6}\t{g}\t-\n",
                    r.variant
                ));
            }
            Outcome::Failed(msg) => {
                let msg = msg.replace(['\t', '\n'], " ");
                out.push_str(&format!("{}\t{FAILED}\t-\t-\t-\t-\t{msg}\n", r.variant));
            }
        }
    }
    out
}
