//! Scaled dot-product attention and query-key normalized attention.
//!
//! Scaled dot-product attention computes `softmax(Q K^T / sqrt(d_head)) V`.
//! Query-key normalized attention l2-normalizes every query and key row
//! along the head dimension, so `Q^ K^^T` holds cosine similarities in
//! `[-1, 1]`, and multiplies them by a learnable scale `g` in place of the
//! `1 / sqrt(d_head)` factor: `softmax(g * Q^ K^^T) V`. The scale starts at
//! `g0 = log2(L^2 - L)`, where `L` is a high percentile of the training
//! sequence lengths.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::L2_EPS;
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Tensor};

/// Logit written into blocked positions before the softmax.
pub const MASK_VALUE: f64 = -1e9;

/// Percentile of training sequence lengths used for `L` by default.
pub const DEFAULT_PERCENTILE: f64 = 97.5;

/// Which attention variant a layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    ScaledDotProduct,
    QkNorm,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::ScaledDotProduct => "scaled-dot-product",
            AttentionKind::QkNorm => "qknorm",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "scaled-dot-product" | "sdp" | "dot" => Ok(AttentionKind::ScaledDotProduct),
            "qknorm" | "qk-norm" => Ok(AttentionKind::QkNorm),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Attention variant bound to tape variables.
#[derive(Clone, Copy, Debug)]
pub enum AttentionMode {
    ScaledDotProduct,
    /// `g` holds one element (shared by all heads) or one per head.
    QkNorm { g: Var, normalize_v: bool },
}

impl AttentionMode {
    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionMode::ScaledDotProduct => AttentionKind::ScaledDotProduct,
            AttentionMode::QkNorm { .. } => AttentionKind::QkNorm,
        }
    }
}

/// Nearest-rank percentile: the sorted element at 1-based index
/// `ceil(p / 100 * n)`.
pub fn sequence_length_percentile(lengths: &[usize], p: f64) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::Empty("length list"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidArgument(format!("percentile must lie in (0, 100], got {p}")));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // p * n is exact for the percentiles in use; dividing last keeps
    // integral ranks integral.
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Initial QKNorm scale `log2(L^2 - L)`.
pub fn g0_init(l: usize) -> Result<f64> {
    if l < 2 {
        return Err(Error::InvalidArgument(format!(
            "g0 needs L >= 2: log2(L^2 - L) is undefined for L = {l} since L^2 - L = {}",
            l * l - l
        )));
    }
    let l = l as f64;
    Ok((l * l - l).log2())
}

/// Sequence-length distribution of a training corpus and the scale it
/// implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    /// Token counts of every training source and target sequence.
    pub lengths: Vec<usize>,
    pub percentile: f64,
    #[serde(rename = "L")]
    pub l: usize,
}

impl LengthStats {
    pub fn new(lengths: Vec<usize>, percentile: f64) -> Result<Self> {
        let l = sequence_length_percentile(&lengths, percentile)?;
        Ok(Self { lengths, percentile, l })
    }

    /// `log2(L^2 - L)`; fails when `L < 2`.
    pub fn g0(&self) -> Result<f64> {
        g0_init(self.l)
    }

    /// Same lengths summarized at another percentile.
    pub fn at_percentile(&self, percentile: f64) -> Result<Self> {
        Self::new(self.lengths.clone(), percentile)
    }

    pub fn max_length(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Result of a single attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Post-softmax weights `[.., n_q, n_kv]`.
    pub weights: Var,
    /// Query-key similarities before scaling and masking: raw dot products
    /// for scaled dot-product attention, cosines for QKNorm.
    pub similarities: Var,
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var) -> Result<()> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let r = sq.len();
    let ok = r >= 2
        && sk.len() == r
        && sv.len() == r
        && sq[..r - 2] == sk[..r - 2]
        && sk[..r - 2] == sv[..r - 2]
        && sq[r - 1] == sk[r - 1]
        && sk[r - 2] == sv[r - 2];
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    Ok(())
}

fn attend(tape: &mut Tape, logits: Var, v: Var, mask: Option<&Mask>, similarities: Var) -> Result<AttentionOutput> {
    let masked = match mask {
        Some(m) => tape.masked_fill(logits, m, MASK_VALUE)?,
        None => logits,
    };
    let last = tape.shape(masked).len() - 1;
    let weights = tape.softmax(masked, last)?;
    let output = tape.matmul(weights, v)?;
    Ok(AttentionOutput {
        output,
        weights,
        similarities,
    })
}

/// `softmax(Q K^T / sqrt(d_head)) V` over `[.., n, d_head]` inputs.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<AttentionOutput> {
    check_qkv(tape, q, k, v)?;
    let d_head = *tape.shape(q).last().expect("rank checked");
    let kt = tape.transpose(k)?;
    let dots = tape.matmul(q, kt)?;
    let logits = tape.scale(dots, 1.0 / (d_head as f64).sqrt());
    attend(tape, logits, v, mask, dots)
}

/// Cosine similarities between every query row and key row.
pub fn cosine_similarities(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let last = tape.shape(q).len().saturating_sub(1);
    let qh = tape.l2_normalize(q, last, L2_EPS)?;
    let kh = tape.l2_normalize(k, last, L2_EPS)?;
    let kt = tape.transpose(kh)?;
    tape.matmul(qh, kt)
}

/// `softmax(g * Q^ K^^T) V` where `Q^`, `K^` are unit rows along the head
/// dimension. `V` is left as is unless `normalize_v` is set.
///
/// `g` holds one element, or one per head when inputs are `[.., h, n, d]`.
pub fn qknorm_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    g: Var,
    mask: Option<&Mask>,
    normalize_v: bool,
) -> Result<AttentionOutput> {
    check_qkv(tape, q, k, v)?;
    let cos = cosine_similarities(tape, q, k)?;
    let rank = tape.shape(cos).len();
    let g_len = tape.value(g).numel();
    let logits = if g_len == 1 {
        tape.scale_by(cos, g, None)?
    } else {
        if rank < 3 {
            return Err(Error::ShapeMismatch {
                op: "qknorm per-head scale",
                lhs: tape.shape(cos).to_vec(),
                rhs: tape.shape(g).to_vec(),
            });
        }
        tape.scale_by(cos, g, Some(rank - 3))?
    };
    let v = if normalize_v {
        let last = tape.shape(v).len() - 1;
        tape.l2_normalize(v, last, L2_EPS)?
    } else {
        v
    };
    attend(tape, logits, v, mask, cos)
}

/// Projection weights of one multi-head attention sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub num_heads: usize,
}

impl AttentionParams {
    /// Xavier-uniform projections.
    pub fn init<R: Rng + ?Sized>(d_model: usize, num_heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d_model, num_heads)?;
        let limit = (6.0 / (2 * d_model) as f64).sqrt();
        let mut w = || Tensor::uniform(&[d_model, d_model], -limit, limit, rng);
        Ok(Self {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
            num_heads,
        })
    }

    /// All four projections set to the identity.
    pub fn identity(d_model: usize, num_heads: usize) -> Result<Self> {
        check_heads(d_model, num_heads)?;
        let mut eye = Tensor::zeros(&[d_model, d_model]);
        for i in 0..d_model {
            eye.data_mut()[i * d_model + i] = 1.0;
        }
        Ok(Self {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            num_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.num_heads
    }

    /// Places the projections on `tape` as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            w_o: tape.param(self.w_o.clone()),
            num_heads: self.num_heads,
        }
    }
}

pub(crate) fn check_heads(d_model: usize, num_heads: usize) -> Result<()> {
    if num_heads == 0 || d_model == 0 || d_model % num_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} must be a positive multiple of num_heads {num_heads}"
        )));
    }
    Ok(())
}

/// [`AttentionParams`] living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub num_heads: usize,
}

/// Multi-head attention output.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadOutput {
    /// `[n_q, d_model]` or `[batch, n_q, d_model]`, matching the input.
    pub output: Var,
    /// `[batch, heads, n_q, n_kv]`.
    pub weights: Var,
}

/// Projects, splits into heads, attends per head with `mode`, merges the
/// heads and applies the output projection.
///
/// Inputs are `[n, d_model]` or `[batch, n, d_model]`. `mask` aligns with
/// the trailing axes of the `[batch, heads, n_q, n_kv]` logits.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    params: &AttentionVars,
    mode: AttentionMode,
    mask: Option<&Mask>,
) -> Result<MultiHeadOutput> {
    let sq = tape.shape(x_q).to_vec();
    let skv = tape.shape(x_kv).to_vec();
    let unbatched = sq.len() == 2;
    let mismatch = || Error::ShapeMismatch {
        op: "multi_head_attention",
        lhs: sq.clone(),
        rhs: skv.clone(),
    };
    if !(sq.len() == 2 || sq.len() == 3) || skv.len() != sq.len() {
        return Err(mismatch());
    }
    let d_model = *sq.last().expect("rank checked");
    if skv.last() != Some(&d_model) || (!unbatched && sq[0] != skv[0]) {
        return Err(mismatch());
    }
    if tape.shape(params.w_q) != [d_model, d_model] {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention weights",
            lhs: sq.clone(),
            rhs: tape.shape(params.w_q).to_vec(),
        });
    }
    check_heads(d_model, params.num_heads)?;
    let heads = params.num_heads;
    let head_dim = d_model / heads;
    let batch = if unbatched { 1 } else { sq[0] };
    let nq = sq[sq.len() - 2];
    let nkv = skv[skv.len() - 2];

    let split = |tape: &mut Tape, x: Var, w: Var, n: usize| -> Result<Var> {
        let p = tape.matmul(x, w)?;
        let p = tape.reshape(p, &[batch, n, heads, head_dim])?;
        tape.permute(p, &[0, 2, 1, 3])
    };
    let q = split(tape, x_q, params.w_q, nq)?;
    let k = split(tape, x_kv, params.w_k, nkv)?;
    let v = split(tape, x_kv, params.w_v, nkv)?;

    let attn = match mode {
        AttentionMode::ScaledDotProduct => scaled_dot_attention(tape, q, k, v, mask)?,
        AttentionMode::QkNorm { g, normalize_v } => qknorm_attention(tape, q, k, v, g, mask, normalize_v)?,
    };
    let merged = tape.permute(attn.output, &[0, 2, 1, 3])?;
    let merged = if unbatched {
        tape.reshape(merged, &[nq, d_model])?
    } else {
        tape.reshape(merged, &[batch, nq, d_model])?
    };
    let output = tape.matmul(merged, params.w_o)?;
    Ok(MultiHeadOutput {
        output,
        weights: attn.weights,
    })
}
