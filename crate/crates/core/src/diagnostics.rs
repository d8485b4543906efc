//! Attention entropy and heatmap export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{with_eos, AttentionSite, ForwardOptions, SeqBatch, Transformer};
use crate::tensor::{Mask, Tensor};
use crate::vocab::Vocab;

/// Tolerance on attention rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>()
}

/// Per-head attention entropy.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EntropyReport {
    /// Mean row entropy per head, in nats.
    pub per_head: Vec<f64>,
    /// Mean of `H / ln(unblocked keys)` per head, over rows with more than
    /// one unblocked key.
    pub per_head_normalized: Vec<f64>,
    /// Mean over heads of `per_head`.
    pub mean: f64,
    pub mean_normalized: f64,
    /// Rows that contributed, summed over heads.
    pub rows: usize,
}

/// Running sums behind an [`EntropyReport`].
#[derive(Clone, Debug, Default)]
pub struct EntropyAccumulator {
    sum: Vec<f64>,
    count: Vec<usize>,
    norm_sum: Vec<f64>,
    norm_count: Vec<usize>,
}

impl EntropyAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, heads: usize) {
        if self.sum.len() < heads {
            self.sum.resize(heads, 0.0);
            self.count.resize(heads, 0);
            self.norm_sum.resize(heads, 0.0);
            self.norm_count.resize(heads, 0);
        }
    }

    /// Adds every row of `weights` (`[.., heads, n_q, n_kv]`, or `[n_q,
    /// n_kv]` for one head). `mask` marks blocked entries; rows with no
    /// unblocked entry are skipped.
    pub fn add(&mut self, weights: &Tensor, mask: Option<&Mask>) -> Result<()> {
        let shape = weights.shape();
        let rank = shape.len();
        if rank < 2 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "attention weights need rank >= 2".into(),
            });
        }
        let (nq, nkv) = (shape[rank - 2], shape[rank - 1]);
        let heads = if rank >= 3 { shape[rank - 3] } else { 1 };
        self.ensure(heads);
        let blocked = match mask {
            Some(m) => m.broadcast_to(shape)?,
            None => vec![false; weights.numel()],
        };
        let data = weights.data();
        for (r, row) in data.chunks(nkv).enumerate() {
            let head = (r / nq) % heads;
            let row_blocked = &blocked[r * nkv..(r + 1) * nkv];
            let open = row_blocked.iter().filter(|b| !**b).count();
            if open == 0 {
                continue;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|w| !(w >= &0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "attention row {r} is not a distribution (sums to {sum})"
                )));
            }
            let h = entropy(row);
            self.sum[head] += h;
            self.count[head] += 1;
            if open > 1 {
                self.norm_sum[head] += h / (open as f64).ln();
                self.norm_count[head] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> EntropyReport {
        let mean_of = |s: &[f64], c: &[usize]| -> Vec<f64> {
            s.iter().zip(c).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
        };
        let per_head = mean_of(&self.sum, &self.count);
        let per_head_normalized = mean_of(&self.norm_sum, &self.norm_count);
        let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        EntropyReport {
            mean: avg(&per_head),
            mean_normalized: avg(&per_head_normalized),
            per_head,
            per_head_normalized,
            rows: self.count.iter().sum(),
        }
    }
}

/// Mean entropy per head over unblocked rows of `weights` `[h, n_q, n_kv]`.
pub fn attention_entropy(weights: &Tensor, mask: Option<&Mask>) -> Result<EntropyReport> {
    let mut acc = EntropyAccumulator::new();
    acc.add(weights, mask)?;
    Ok(acc.report())
}

/// Entropy of each row of `[.., n_kv]` weights; blocked-out rows give
/// `None`.
pub fn row_entropies(weights: &Tensor, mask: Option<&Mask>) -> Result<Vec<Option<f64>>> {
    let shape = weights.shape();
    let nkv = *shape.last().ok_or(Error::Empty("attention weights"))?;
    let blocked = match mask {
        Some(m) => m.broadcast_to(shape)?,
        None => vec![false; weights.numel()],
    };
    Ok(weights
        .data()
        .chunks(nkv)
        .zip(blocked.chunks(nkv))
        .map(|(row, b)| b.iter().any(|x| !x).then(|| entropy(row)))
        .collect())
}

/// Mean encoder self-attention entropy of `model` over source sequences,
/// all layers pooled per head. Padded query rows and keys are excluded.
pub fn encoder_attention_entropy(model: &Transformer, sources: &[Vec<usize>], batch_size: usize) -> Result<EntropyReport> {
    let mut acc = EntropyAccumulator::new();
    for chunk in sources.chunks(batch_size.max(1)) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|s| with_eos(s)).collect();
        let batch = SeqBatch::new(&ids)?;
        let opts = ForwardOptions {
            keep_attention: true,
            ..ForwardOptions::default()
        };
        let mut session = model.session(opts, 0);
        session.encode(&batch)?;
        let n = batch.len;
        let mut mask = Vec::with_capacity(batch.batch * n * n);
        for b in 0..batch.batch {
            for i in 0..n {
                for j in 0..n {
                    mask.push(batch.is_pad(b, i) || batch.is_pad(b, j));
                }
            }
        }
        let mask = Mask::new(vec![batch.batch, 1, n, n], mask)?;
        for rec in session.attention.iter().filter(|r| r.site == AttentionSite::EncoderSelf) {
            acc.add(session.tape.value(rec.weights), Some(&mask))?;
        }
    }
    Ok(acc.report())
}

/// Attention weights of one encoder head for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRecord {
    pub layer: usize,
    pub head: usize,
    /// `[n_q][n_kv]` post-softmax weights.
    pub weights: Vec<Vec<f64>>,
    pub query_tokens: Vec<String>,
    pub key_tokens: Vec<String>,
}

impl HeatmapRecord {
    pub fn file_name(&self) -> String {
        format!("layer{}_head{}.tsv", self.layer, self.head)
    }

    /// One query row per line, tab-separated, shortest round-trip decimal.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for row in &self.weights {
            let line: Vec<String> = row.iter().map(|w| format!("{w}")).collect();
            out.push_str(&line.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Encoder self-attention heatmaps for every layer and head on one source
/// sentence (EOS appended).
pub fn collect_heatmaps(model: &Transformer, src_vocab: &Vocab, src_tokens: &[String]) -> Result<Vec<HeatmapRecord>> {
    if src_tokens.is_empty() {
        return Err(Error::Empty("source sentence"));
    }
    let ids = with_eos(&src_vocab.encode(src_tokens));
    let tokens = src_vocab.decode(&ids);
    let batch = SeqBatch::new(&[ids])?;
    let opts = ForwardOptions {
        keep_attention: true,
        ..ForwardOptions::default()
    };
    let mut session = model.session(opts, 0);
    session.encode(&batch)?;
    let mut records = Vec::new();
    for rec in session.attention.iter().filter(|r| r.site == AttentionSite::EncoderSelf) {
        let w = session.tape.value(rec.weights);
        let shape = w.shape();
        let (heads, nq, nkv) = (shape[1], shape[2], shape[3]);
        for h in 0..heads {
            let base = h * nq * nkv;
            let weights = (0..nq)
                .map(|i| w.data()[base + i * nkv..base + (i + 1) * nkv].to_vec())
                .collect();
            records.push(HeatmapRecord {
                layer: rec.layer,
                head: h,
                weights,
                query_tokens: tokens.clone(),
                key_tokens: tokens.clone(),
            });
        }
    }
    Ok(records)
}

/// Writes one `layer{L}_head{H}.tsv` per encoder head plus `manifest.tsv`
/// into `out_dir`. Returns the written paths, manifest last.
///
/// The manifest has a `kind<TAB>name<TAB>values...` header; `tokens` rows
/// list the source and target tokens, `file` rows give file name, layer,
/// head, rows and columns.
pub fn export_heatmaps(
    model: &Transformer,
    src_vocab: &Vocab,
    src_tokens: &[String],
    tgt_tokens: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let records = collect_heatmaps(model, src_vocab, src_tokens)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(records.len() + 1);
    let mut manifest = String::from("kind\tname\tvalues\n");
    manifest.push_str(&format!("tokens\tsource\t{}\n", records.first().map_or(String::new(), |r| r.key_tokens.join("\t"))));
    manifest.push_str(&format!("tokens\ttarget\t{}\n", tgt_tokens.join("\t")));
    for rec in &records {
        let path = out_dir.join(rec.file_name());
        fs::write(&path, rec.to_tsv()).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!(
            "file\t{}\t{}\t{}\t{}\t{}\n",
            rec.file_name(),
            rec.layer,
            rec.head,
            rec.weights.len(),
            rec.weights.first().map_or(0, Vec::len)
        ));
        written.push(path);
    }
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
