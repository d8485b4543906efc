//! Query-key normalized attention and the small translation lab around it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod norm;
pub mod optim;
pub mod schedule;
pub mod sweep;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use attention::{AttentionKind, AttentionMode, AttentionParams, LengthStats};
pub use config::RunConfig;
pub use data::Corpus;
pub use error::{Error, Result};
pub use model::{ModelConfig, Transformer};
pub use tape::{Tape, Var};
pub use tensor::{Mask, Tensor};
pub use train::TrainConfig;
pub use vocab::Vocab;

/// Deterministic generator used for every seeded draw.
pub type SeededRng = rand_xoshiro::Xoshiro256PlusPlus;
