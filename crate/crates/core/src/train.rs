//! Training loop, evaluation and run configuration.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::bleu::{bleu, BleuReport, MAX_N};
use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{Corpus, Pair, Split};
use crate::diagnostics::{encoder_attention_entropy, EntropyReport};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelConfig, ParamStore, Transformer};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::Schedule;
use crate::vocab::Vocab;
use crate::SeededRng;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub decay_factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Seeds model initialization, shuffling and dropout.
    pub seed: u64,
    /// Best-so-far weights are written here when set.
    pub checkpoint: Option<PathBuf>,
    pub label_smoothing: f64,
    pub clip_norm: Option<f64>,
    /// Sentences per greedy-decoding batch during evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            base_lr: s.base_lr,
            warmup_steps: s.warmup_steps,
            decay_factor: s.decay_factor,
            patience: s.patience,
            min_lr: s.min_lr,
            max_epochs: 50,
            batch_size: 32,
            seed: 1,
            checkpoint: None,
            label_smoothing: 0.0,
            clip_norm: Some(1.0),
            eval_batch_size: 100,
        }
    }
}

impl TrainConfig {
    /// Base-scale warmup of 8000 steps.
    pub fn base_scale() -> Self {
        Self {
            warmup_steps: 8000,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            decay_factor: self.decay_factor,
            patience: self.patience,
            min_lr: self.min_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.max_epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("max_epochs, batch_size and eval_batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Fills the corpus-dependent fields of `base`: vocabulary sizes, a
/// sequence-length limit that fits every split, and `g_init` from the
/// training-length percentile when QKNorm is selected and no value is set.
pub fn resolve_model_config(base: &ModelConfig, corpus: &Corpus) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    cfg.src_vocab_size = corpus.src_vocab.len();
    cfg.tgt_vocab_size = corpus.tgt_vocab.len();
    cfg.max_seq_len = cfg.max_seq_len.max(decode_limit(corpus.max_len()) + 1);
    if cfg.attention_mode == AttentionKind::QkNorm && cfg.g_init.is_none() {
        cfg.g_init = Some(corpus.length_stats.at_percentile(cfg.g_percentile)?.g0()?);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Greedy-decoding length budget for a source of `src_len` tokens.
pub fn decode_limit(src_len: usize) -> usize {
    2 * src_len + 10
}

/// Decoded hypotheses with BLEU and token accuracy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu: BleuReport,
    /// Share of reference positions, end-of-sequence included, where the
    /// hypothesis has the same token.
    pub token_accuracy: f64,
    /// Share of sentences decoded exactly.
    pub exact_match: f64,
    #[serde(skip)]
    pub hypotheses: Vec<Vec<String>>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = self.bleu.to_tsv();
        out.push_str(&format!("token_accuracy\t{:.6}\n", self.token_accuracy));
        out.push_str(&format!("exact_match\t{:.6}\n", self.exact_match));
        out
    }
}

/// Greedy-decodes `pairs` and scores them against their targets.
pub fn evaluate(model: &Transformer, src_vocab: &Vocab, tgt_vocab: &Vocab, pairs: &[Pair], batch_size: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let limit = model.config().max_seq_len.saturating_sub(1).max(1);
    let mut hypotheses = Vec::with_capacity(pairs.len());
    let mut terminated = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|p| src_vocab.encode(&p.src)).collect();
        let longest = src.iter().map(Vec::len).max().unwrap_or(0);
        let max_len = decode_limit(longest).min(limit);
        for ids in model.greedy_decode(&src, max_len)? {
            terminated.push(ids.len() < max_len);
            hypotheses.push(tgt_vocab.decode(&ids));
        }
    }
    let references: Vec<Vec<String>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    let (mut correct, mut total, mut exact) = (0usize, 0usize, 0usize);
    for ((hyp, r), &done) in hypotheses.iter().zip(&references).zip(&terminated) {
        total += r.len() + 1;
        correct += hyp.iter().zip(r).filter(|(h, r)| h == r).count();
        if done && hyp.len() == r.len() {
            correct += 1;
            if hyp == r {
                exact += 1;
            }
        }
    }
    Ok(EvalReport {
        bleu: bleu(&hypotheses, &references, MAX_N)?,
        token_accuracy: correct as f64 / total as f64,
        exact_match: exact as f64 / pairs.len() as f64,
        hypotheses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub dev_bleu: f64,
    /// Rate the next step will use.
    pub lr: f64,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MinLr,
    MaxEpochs,
}

/// Full record of a [`fit`] call.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_bleu: f64,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Per-step `step epoch lr loss grad_norm` rows with a header; floats
    /// print as shortest round-trip decimals.
    pub fn steps_tsv(&self) -> String {
        let mut out = String::from("step\tepoch\tlr\tloss\tgrad_norm\n");
        for s in &self.steps {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", s.step, s.epoch, s.lr, s.loss, s.grad_norm));
        }
        out
    }

    pub fn epochs_tsv(&self) -> String {
        let mut out = String::from("epoch\tsteps\tmean_loss\tdev_bleu\tlr\timproved\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.steps, e.mean_loss, e.dev_bleu, e.lr, e.improved
            ));
        }
        out
    }
}

/// Trains `model` on the corpus training split.
///
/// Dev BLEU is computed after every epoch (on the training split when the
/// corpus has no dev pairs) and drives both decay and checkpointing. On
/// return the model holds the weights of the best dev epoch.
pub fn fit(model: &mut Transformer, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    if model.config().src_vocab_size < corpus.src_vocab.len() || model.config().tgt_vocab_size < corpus.tgt_vocab.len() {
        return Err(Error::Config("model vocabulary is smaller than the corpus vocabulary".into()));
    }
    let (src, tgt) = corpus.encode(Split::Train);
    let dev: &[Pair] = if corpus.dev.is_empty() { &corpus.train } else { &corpus.dev };
    let mut opt = Adam::new(
        model.params().tensors(),
        AdamConfig {
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
    );
    let mut rng = SeededRng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..src.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    let opts = ForwardOptions {
        train: true,
        track_grads: true,
        ..ForwardOptions::default()
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let first = steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            let step = steps.len() + 1;
            let lr = schedule.lr_at(step, &history);
            let bs: Vec<Vec<usize>> = chunk.iter().map(|&i| src[i].clone()).collect();
            let bt: Vec<Vec<usize>> = chunk.iter().map(|&i| tgt[i].clone()).collect();
            let grads: Vec<Option<Vec<f64>>>;
            let loss;
            {
                let dropout_seed = cfg.seed ^ DROPOUT_STREAM ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let mut session = model.session(opts, dropout_seed);
                let l = session.loss(&bs, &bt, cfg.label_smoothing)?;
                loss = session.tape.value(l).item()?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step, loss });
                }
                session.tape.backward(l)?;
                grads = session.param_grads().into_iter().map(|g| g.map(<[f64]>::to_vec)).collect();
            }
            let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
            let grad_norm = match opt.step(model.params_mut().tensors_mut(), &grad_refs, lr) {
                Ok(n) => n,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss }),
                Err(e) => return Err(e),
            };
            loss_sum += loss;
            steps.push(StepLog {
                step,
                epoch,
                lr,
                loss,
                grad_norm,
            });
        }
        let n_steps = steps.len() - first;
        let dev_bleu = evaluate(model, &corpus.src_vocab, &corpus.tgt_vocab, dev, cfg.eval_batch_size)?.bleu.bleu;
        history.push(dev_bleu);
        let improved = best.as_ref().map_or(true, |(_, b, _)| dev_bleu > *b);
        if improved {
            best = Some((epoch, dev_bleu, model.params().clone()));
            if let Some(path) = &cfg.checkpoint {
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    tokenizer: corpus.tokenizer,
                    src_vocab: corpus.src_vocab.clone(),
                    tgt_vocab: corpus.tgt_vocab.clone(),
                    epoch: Some(epoch),
                    dev_bleu: Some(dev_bleu),
                };
                checkpoint::save(path, model, &meta)?;
            }
        }
        epochs.push(EpochLog {
            epoch,
            steps: n_steps,
            mean_loss: if n_steps == 0 { 0.0 } else { loss_sum / n_steps as f64 },
            dev_bleu,
            lr: schedule.lr_at(steps.len() + 1, &history),
            improved,
        });
        if schedule.exhausted(&history) {
            stop_reason = StopReason::MinLr;
            break;
        }
    }
    let (best_epoch, best_dev_bleu, params) = best.expect("at least one epoch runs");
    *model.params_mut() = params;
    Ok(TrainLog {
        steps,
        epochs,
        best_epoch,
        best_dev_bleu,
        stop_reason,
    })
}

/// Outcome of training plus test evaluation.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: Transformer,
    pub log: TrainLog,
    pub test: EvalReport,
    /// Mean encoder self-attention entropy on the test sources.
    pub entropy: EntropyReport,
}

/// Resolves the config against the corpus, trains from `train.seed`, and
/// evaluates the best weights on the test split (dev when test is empty).
pub fn run(model_cfg: &ModelConfig, train: &TrainConfig, corpus: &Corpus) -> Result<RunResult> {
    let cfg = resolve_model_config(model_cfg, corpus)?;
    let mut model = Transformer::new(cfg, train.seed)?;
    let log = fit(&mut model, corpus, train)?;
    let test_pairs: &[Pair] = if !corpus.test.is_empty() {
        &corpus.test
    } else if !corpus.dev.is_empty() {
        &corpus.dev
    } else {
        &corpus.train
    };
    let test = evaluate(&model, &corpus.src_vocab, &corpus.tgt_vocab, test_pairs, train.eval_batch_size)?;
    let (sources, _) = corpus.encode_pairs(test_pairs);
    let entropy = encoder_attention_entropy(&model, &sources, train.eval_batch_size)?;
    Ok(RunResult {
        model,
        log,
        test,
        entropy,
    })
}
