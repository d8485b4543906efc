//! Normalization primitives: l2 row normalization, LayerNorm, ScaleNorm and
//! FixNorm.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator guard for l2 norms.
pub const L2_EPS: f64 = 1e-6;
/// Variance guard for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x / (||x|| + eps)` along `axis`. A zero slice maps to zero.
pub fn l2_normalize(tape: &mut Tape, x: Var, axis: usize, eps: f64) -> Result<Var> {
    tape.l2_normalize(x, axis, eps)
}

/// Learnable gain and bias for [`layer_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    /// Unit gain, zero bias.
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.rank() != 1 || self.gain.shape() != self.bias.shape() {
            return Err(Error::ShapeMismatch {
                op: "layer_norm params",
                lhs: self.gain.shape().to_vec(),
                rhs: self.bias.shape().to_vec(),
            });
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` over the trailing axis.
pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, gain, bias, eps)
}

/// Learnable scalar for [`scale_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleNormParams {
    pub g_scale: Tensor,
    pub eps: f64,
}

impl ScaleNormParams {
    /// `g_scale` starts at `1 / sqrt(d)`.
    pub fn new(d: usize) -> Self {
        Self {
            g_scale: Tensor::scalar(1.0 / (d as f64).sqrt()),
            eps: L2_EPS,
        }
    }
}

/// `g_scale * x / (||x|| + eps)` over the trailing axis.
pub fn scale_norm(tape: &mut Tape, x: Var, g_scale: Var, eps: f64) -> Result<Var> {
    let rank = tape.shape(x).len();
    if rank == 0 {
        return Err(Error::InvalidShape {
            shape: vec![],
            reason: "scale_norm needs rank >= 1".into(),
        });
    }
    let unit = tape.l2_normalize(x, rank - 1, eps)?;
    tape.scale_by(unit, g_scale, None)
}

/// Unit-length rows of an embedding table (or of rows already gathered
/// from one). Applied at every lookup so gradients flow through it.
pub fn fix_norm_apply(tape: &mut Tape, embeddings: Var) -> Result<Var> {
    let rank = tape.shape(embeddings).len();
    if rank == 0 {
        return Err(Error::InvalidShape {
            shape: vec![],
            reason: "fix_norm needs rank >= 1".into(),
        });
    }
    tape.l2_normalize(embeddings, rank - 1, L2_EPS)
}
