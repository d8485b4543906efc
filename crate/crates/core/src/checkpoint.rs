//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes   "QKNCKPT1"
//! header_len  u64
//! header      header_len bytes of UTF-8 JSON (see `Header`)
//! values      f64 per scalar, parameters in header order, row-major
//! ```
//!
//! The header records the model config, seed, vocabularies, tokenizer, the
//! name and shape of every parameter, the QKNorm scales, and the epoch and
//! dev BLEU the weights came from.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::tensor::Tensor;
use crate::vocab::{TokenizerMode, Vocab};

pub const MAGIC: &[u8; 8] = b"QKNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    tokenizer: TokenizerMode,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    epoch: Option<usize>,
    dev_bleu: Option<f64>,
    g_values: Vec<(String, Vec<f64>)>,
    params: Vec<ParamEntry>,
}

/// Everything stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub tokenizer: TokenizerMode,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub epoch: Option<usize>,
    pub dev_bleu: Option<f64>,
}

pub fn to_bytes(model: &Transformer, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        seed: meta.seed,
        tokenizer: meta.tokenizer,
        src_vocab: meta.src_vocab.clone(),
        tgt_vocab: meta.tgt_vocab.clone(),
        epoch: meta.epoch,
        dev_bleu: meta.dev_bleu,
        g_values: model.g_values(),
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Transformer, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let mut values = body[len..].chunks_exact(8);
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if values.len() != expected || !values.remainder().is_empty() {
        return Err(Error::Checkpoint(format!(
            "expected {expected} values, found {} bytes",
            body.len() - len
        )));
    }
    let mut tensors = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let data: Vec<f64> = values
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((p.name.as_str(), Tensor::new(p.shape.clone(), data)?));
    }
    let mut model = Transformer::new(header.config.clone(), header.seed)?;
    model.params_mut().load(tensors)?;
    let meta = CheckpointMeta {
        seed: header.seed,
        tokenizer: header.tokenizer,
        src_vocab: header.src_vocab,
        tgt_vocab: header.tgt_vocab,
        epoch: header.epoch,
        dev_bleu: header.dev_bleu,
    };
    Ok((model, meta))
}

pub fn save(path: &Path, model: &Transformer, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Transformer, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
