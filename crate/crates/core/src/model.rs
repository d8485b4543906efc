//! Encoder-decoder Transformer with switchable normalization stack and
//! attention variant.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{check_heads, multi_head_attention, AttentionKind, AttentionMode, AttentionVars};
use crate::error::{Error, Result};
use crate::norm::{self, L2_EPS, LAYER_NORM_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Tensor};
use crate::vocab::{BOS, EOS, PAD};
use crate::SeededRng;

/// Where each sublayer's normalization sits relative to the residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    /// `x + Dropout(Sublayer(Norm(x)))`
    PreNorm,
    /// `Norm(x + Dropout(Sublayer(x)))`
    PostNorm,
}

/// Normalization used around sublayers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualNorm {
    LayerNorm,
    ScaleNorm,
}

macro_rules! kebab_enum {
    ($ty:ident { $($variant:ident => $name:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().replace('_', "-").as_str() {
                    $($name $(| $alias)* => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

kebab_enum!(NormPlacement { PreNorm => "pre-norm" | "prenorm" | "pre", PostNorm => "post-norm" | "postnorm" | "post" });
kebab_enum!(ResidualNorm { LayerNorm => "layer-norm" | "layernorm", ScaleNorm => "scale-norm" | "scalenorm" });

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    /// Layers in the encoder and, separately, in the decoder. Zero gives an
    /// identity stack.
    pub num_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub norm_placement: NormPlacement,
    pub residual_norm: ResidualNorm,
    pub use_fixnorm: bool,
    pub attention_mode: AttentionKind,
    /// Initial QKNorm scale. Training fills this from corpus length
    /// statistics when unset.
    pub g_init: Option<f64>,
    /// Percentile of training lengths that sets `L` for `g_init`.
    pub g_percentile: f64,
    pub g_learnable: bool,
    pub per_head_g: bool,
    /// Also l2-normalize value rows in QKNorm attention.
    pub normalize_v: bool,
    pub tie_embeddings: bool,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 8,
            num_layers: 2,
            d_ff: 256,
            dropout: 0.1,
            norm_placement: NormPlacement::PreNorm,
            residual_norm: ResidualNorm::LayerNorm,
            use_fixnorm: true,
            attention_mode: AttentionKind::QkNorm,
            g_init: None,
            g_percentile: crate::attention::DEFAULT_PERCENTILE,
            g_learnable: true,
            per_head_g: false,
            normalize_v: false,
            tie_embeddings: false,
            src_vocab_size: 0,
            tgt_vocab_size: 0,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    /// Base-size dimensions: 512 wide, 6 layers, 8 heads.
    pub fn base_scale() -> Self {
        Self {
            d_model: 512,
            num_heads: 8,
            num_layers: 6,
            d_ff: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.d_model, self.num_heads)?;
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_ff and max_seq_len must be positive".into()));
        }
        if self.src_vocab_size <= EOS || self.tgt_vocab_size <= EOS {
            return Err(Error::Config(format!(
                "vocabularies must include the special tokens (got {} / {})",
                self.src_vocab_size, self.tgt_vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.g_percentile > 0.0 && self.g_percentile <= 100.0) {
            return Err(Error::Config(format!("g_percentile must lie in (0, 100], got {}", self.g_percentile)));
        }
        if let Some(g) = self.g_init {
            if !g.is_finite() {
                return Err(Error::Config(format!("g_init must be finite, got {g}")));
            }
        }
        Ok(())
    }

    /// Number of attention sublayers: one per encoder layer, two per decoder
    /// layer.
    pub fn attention_sublayers(&self) -> usize {
        3 * self.num_layers
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(trainable));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    /// Replaces values by name. Every stored name must be supplied with a
    /// matching shape.
    pub fn load<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in values {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            let trainable = self.tensors[i].requires_grad();
            self.tensors[i] = t.with_requires_grad(trainable);
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter `{}`", self.names[i])));
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape, track_grads: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let t = t.clone();
                if track_grads {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum NormIds {
    Layer { gain: ParamId, bias: ParamId },
    Scale { g: ParamId },
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    g: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: NormIds,
    attn: AttnIds,
    ff_norm: NormIds,
    ff: FfIds,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: NormIds,
    self_attn: AttnIds,
    cross_norm: NormIds,
    cross_attn: AttnIds,
    ff_norm: NormIds,
    ff: FfIds,
}

#[derive(Clone, Debug)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    encoder_final: Option<NormIds>,
    decoder_final: Option<NormIds>,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    store: ParamStore,
    rng: SeededRng,
}

impl Builder<'_> {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(&[fan_in, fan_out], -limit, limit, &mut self.rng);
        self.store.add(name, t, true)
    }

    fn norm(&mut self, prefix: &str) -> NormIds {
        let d = self.cfg.d_model;
        match self.cfg.residual_norm {
            ResidualNorm::LayerNorm => NormIds::Layer {
                gain: self.store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0), true),
                bias: self.store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]), true),
            },
            ResidualNorm::ScaleNorm => NormIds::Scale {
                g: self.store.add(format!("{prefix}.g"), Tensor::scalar(1.0 / (d as f64).sqrt()), true),
            },
        }
    }

    fn attention(&mut self, prefix: &str) -> Result<AttnIds> {
        let d = self.cfg.d_model;
        let w_q = self.xavier(format!("{prefix}.w_q"), d, d);
        let w_k = self.xavier(format!("{prefix}.w_k"), d, d);
        let w_v = self.xavier(format!("{prefix}.w_v"), d, d);
        let w_o = self.xavier(format!("{prefix}.w_o"), d, d);
        let g = match self.cfg.attention_mode {
            AttentionKind::ScaledDotProduct => None,
            AttentionKind::QkNorm => {
                let g0 = self
                    .cfg
                    .g_init
                    .ok_or_else(|| Error::Config("QKNorm attention needs g_init (or corpus length statistics)".into()))?;
                let t = if self.cfg.per_head_g {
                    Tensor::full(&[self.cfg.num_heads], g0)
                } else {
                    Tensor::scalar(g0)
                };
                Some(self.store.add(format!("{prefix}.g"), t, self.cfg.g_learnable))
            }
        };
        Ok(AttnIds { w_q, w_k, w_v, w_o, g })
    }

    fn feed_forward(&mut self, prefix: &str) -> FfIds {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        FfIds {
            w1: self.xavier(format!("{prefix}.w1"), d, f),
            b1: self.store.add(format!("{prefix}.b1"), Tensor::zeros(&[f]), true),
            w2: self.xavier(format!("{prefix}.w2"), f, d),
            b2: self.store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]), true),
        }
    }
}

/// Encoder-decoder Transformer.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

/// Which attention block an attention record came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSite {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

/// Attention weights kept for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub site: AttentionSite,
    pub layer: usize,
    /// `[batch, heads, n_q, n_kv]`
    pub weights: Var,
}

/// Flags for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Apply dropout.
    pub train: bool,
    /// Register parameters so backward fills their gradients.
    pub track_grads: bool,
    /// Keep attention weights in [`Session::attention`].
    pub keep_attention: bool,
    /// Replace every sublayer output by zeros (residual-path checks).
    #[doc(hidden)]
    pub zero_sublayers: bool,
}

/// Right-padded batch of token id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    /// `batch * len` ids, row-major.
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(Error::Empty("sequence batch"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD).take(len - s.len()));
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            len,
        })
    }

    pub fn is_pad(&self, b: usize, i: usize) -> bool {
        self.ids[b * self.len + i] == PAD
    }

    /// `[batch, 1, 1, len]` mask blocking padded keys.
    pub fn key_padding_mask(&self) -> Mask {
        let data = self.ids.iter().map(|&id| id == PAD).collect();
        Mask::new(vec![self.batch, 1, 1, self.len], data).expect("consistent batch")
    }

    /// `[batch, 1, len, len]` mask blocking future and padded keys.
    pub fn causal_padding_mask(&self) -> Mask {
        let n = self.len;
        let mut data = Vec::with_capacity(self.batch * n * n);
        for b in 0..self.batch {
            for i in 0..n {
                for j in 0..n {
                    data.push(j > i || self.is_pad(b, j));
                }
            }
        }
        Mask::new(vec![self.batch, 1, n, n], data).expect("consistent batch")
    }
}

/// Sinusoidal position encodings `[n, d]`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("positive extents")
}

/// Source or target side of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Transformer {
    /// Builds a freshly initialized model. Initialization is a pure function
    /// of `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut b = Builder {
            cfg,
            store: ParamStore::default(),
            rng: SeededRng::seed_from_u64(seed),
        };
        let d = cfg.d_model;
        let emb_std = 1.0 / (d as f64).sqrt();
        let src_embed = b.store.add(
            "src_embed",
            Tensor::normal(&[cfg.src_vocab_size, d], emb_std, &mut b.rng),
            true,
        );
        let tgt_embed = b.store.add(
            "tgt_embed",
            Tensor::normal(&[cfg.tgt_vocab_size, d], emb_std, &mut b.rng),
            true,
        );
        let mut encoder = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                attn_norm: b.norm(&format!("{p}.self_attn_norm")),
                attn: b.attention(&format!("{p}.self_attn"))?,
                ff_norm: b.norm(&format!("{p}.ff_norm")),
                ff: b.feed_forward(&format!("{p}.ff")),
            });
        }
        let mut decoder = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                self_norm: b.norm(&format!("{p}.self_attn_norm")),
                self_attn: b.attention(&format!("{p}.self_attn"))?,
                cross_norm: b.norm(&format!("{p}.cross_attn_norm")),
                cross_attn: b.attention(&format!("{p}.cross_attn"))?,
                ff_norm: b.norm(&format!("{p}.ff_norm")),
                ff: b.feed_forward(&format!("{p}.ff")),
            });
        }
        let (encoder_final, decoder_final) = match cfg.norm_placement {
            NormPlacement::PreNorm => (Some(b.norm("encoder.final_norm")), Some(b.norm("decoder.final_norm"))),
            NormPlacement::PostNorm => (None, None),
        };
        let out_w = if cfg.tie_embeddings {
            None
        } else {
            Some(b.xavier("generator.w".into(), d, cfg.tgt_vocab_size))
        };
        let out_b = b.store.add("generator.b", Tensor::zeros(&[cfg.tgt_vocab_size]), true);
        let layout = Layout {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            encoder_final,
            decoder_final,
            out_w,
            out_b,
        };
        let params = b.store;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Current QKNorm scales, one entry per attention sublayer in
    /// registration order.
    pub fn g_values(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .filter(|(n, _)| n.ends_with("attn.g"))
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect()
    }

    /// Starts a forward pass on a fresh tape.
    pub fn session(&self, opts: ForwardOptions, dropout_seed: u64) -> Session<'_> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, opts.track_grads);
        Session {
            model: self,
            tape,
            vars,
            opts,
            rng: SeededRng::seed_from_u64(dropout_seed),
            attention: Vec::new(),
        }
    }

    /// Greedy decoding of a batch of source sequences (without BOS/EOS).
    ///
    /// Each output stops at the first EOS or after `max_len` tokens; the EOS
    /// itself is not returned.
    pub fn greedy_decode(&self, src: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        if src.is_empty() {
            return Ok(Vec::new());
        }
        let src_ids: Vec<Vec<usize>> = src.iter().map(|s| with_eos(s)).collect();
        let src_batch = SeqBatch::new(&src_ids)?;
        let mut session = self.session(ForwardOptions::default(), 0);
        let memory = session.encode(&src_batch)?;
        let n = src.len();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        let vocab = self.config.tgt_vocab_size;
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let tgt = SeqBatch::new(&prefixes)?;
            let h = session.decode(&tgt, memory, &src_batch)?;
            let logits = session.logits(h)?;
            let data = session.tape.data(logits);
            let len = tgt.len;
            for b in 0..n {
                if done[b] {
                    prefixes[b].push(PAD);
                    continue;
                }
                let row = &data[(b * len + len - 1) * vocab..(b * len + len) * vocab];
                let next = argmax(row);
                prefixes[b].push(next);
                if next == EOS {
                    done[b] = true;
                }
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| p[1..].iter().copied().take_while(|&t| t != EOS && t != PAD).collect())
            .collect())
    }
}

/// Appends EOS to a source sequence.
pub fn with_eos(seq: &[usize]) -> Vec<usize> {
    let mut s = seq.to_vec();
    s.push(EOS);
    s
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One forward pass of a [`Transformer`] recorded on a tape.
pub struct Session<'m> {
    model: &'m Transformer,
    pub tape: Tape,
    vars: Vec<Var>,
    opts: ForwardOptions,
    rng: SeededRng,
    /// Attention weights, in execution order, when `keep_attention` is set.
    pub attention: Vec<AttentionRecord>,
}

impl Session<'_> {
    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Tape variable holding a parameter, by registration index.
    pub fn param_var(&self, index: usize) -> Var {
        self.vars[index]
    }

    /// Gradients of every parameter after `tape.backward`, in store order.
    /// Frozen parameters yield `None`.
    pub fn param_grads(&self) -> Vec<Option<&[f64]>> {
        self.vars.iter().map(|&v| self.tape.grad(v)).collect()
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.opts.train {
            self.tape.dropout(x, self.model.config.dropout, &mut self.rng)
        } else {
            Ok(x)
        }
    }

    fn norm(&mut self, x: Var, ids: NormIds) -> Result<Var> {
        match ids {
            NormIds::Layer { gain, bias } => {
                let (g, b) = (self.var(gain), self.var(bias));
                norm::layer_norm(&mut self.tape, x, g, b, LAYER_NORM_EPS)
            }
            NormIds::Scale { g } => {
                let g = self.var(g);
                norm::scale_norm(&mut self.tape, x, g, L2_EPS)
            }
        }
    }

    fn sublayer(&mut self, x: Var, norm: NormIds, f: impl FnOnce(&mut Self, Var) -> Result<Var>) -> Result<Var> {
        match self.model.config.norm_placement {
            NormPlacement::PreNorm => {
                let h = self.norm(x, norm)?;
                let y = f(self, h)?;
                let y = self.finish_sublayer(y)?;
                self.tape.add(x, y)
            }
            NormPlacement::PostNorm => {
                let y = f(self, x)?;
                let y = self.finish_sublayer(y)?;
                let s = self.tape.add(x, y)?;
                self.norm(s, norm)
            }
        }
    }

    fn finish_sublayer(&mut self, y: Var) -> Result<Var> {
        if self.opts.zero_sublayers {
            return Ok(self.tape.scale(y, 0.0));
        }
        self.dropout(y)
    }

    fn attention(
        &mut self,
        x_q: Var,
        x_kv: Var,
        ids: AttnIds,
        mask: &Mask,
        site: AttentionSite,
        layer: usize,
    ) -> Result<Var> {
        let vars = AttentionVars {
            w_q: self.var(ids.w_q),
            w_k: self.var(ids.w_k),
            w_v: self.var(ids.w_v),
            w_o: self.var(ids.w_o),
            num_heads: self.model.config.num_heads,
        };
        let mode = match ids.g {
            None => AttentionMode::ScaledDotProduct,
            Some(g) => AttentionMode::QkNorm {
                g: self.var(g),
                normalize_v: self.model.config.normalize_v,
            },
        };
        let out = multi_head_attention(&mut self.tape, x_q, x_kv, &vars, mode, Some(mask))?;
        if self.opts.keep_attention {
            self.attention.push(AttentionRecord {
                site,
                layer,
                weights: out.weights,
            });
        }
        Ok(out.output)
    }

    fn feed_forward(&mut self, x: Var, ids: FfIds) -> Result<Var> {
        let h = self.tape.matmul(x, self.vars[ids.w1.0])?;
        let h = self.tape.add(h, self.vars[ids.b1.0])?;
        let h = self.tape.relu(h);
        let y = self.tape.matmul(h, self.vars[ids.w2.0])?;
        self.tape.add(y, self.vars[ids.b2.0])
    }

    /// Token embeddings, unit-normalized when FixNorm is on, scaled by
    /// `sqrt(d_model)`. Position encodings are added when `positions` is set.
    pub fn embed(&mut self, side: Side, tokens: &SeqBatch, positions: bool) -> Result<Var> {
        let cfg = &self.model.config;
        if tokens.len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len,
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.d_model;
        let table = match side {
            Side::Source => self.var(self.model.layout.src_embed),
            Side::Target => self.var(self.model.layout.tgt_embed),
        };
        let rows = self.tape.gather(table, &tokens.ids)?;
        let rows = if cfg.use_fixnorm {
            norm::fix_norm_apply(&mut self.tape, rows)?
        } else {
            rows
        };
        let rows = self.tape.scale(rows, (d as f64).sqrt());
        let x = self.tape.reshape(rows, &[tokens.batch, tokens.len, d])?;
        if !positions {
            return Ok(x);
        }
        let pe = self.tape.constant(positional_encoding(tokens.len, d));
        let x = self.tape.add(x, pe)?;
        self.dropout(x)
    }

    /// Encoder output `[batch, n_src, d_model]`.
    pub fn encode(&mut self, src: &SeqBatch) -> Result<Var> {
        let mask = src.key_padding_mask();
        let mut x = self.embed(Side::Source, src, true)?;
        let layers = self.model.layout.encoder.clone();
        for (l, layer) in layers.iter().enumerate() {
            x = self.sublayer(x, layer.attn_norm, |s, h| {
                s.attention(h, h, layer.attn, &mask, AttentionSite::EncoderSelf, l)
            })?;
            x = self.sublayer(x, layer.ff_norm, |s, h| s.feed_forward(h, layer.ff))?;
        }
        match self.model.layout.encoder_final {
            Some(n) => self.norm(x, n),
            None => Ok(x),
        }
    }

    /// Decoder output `[batch, n_tgt, d_model]` for teacher-forced inputs.
    pub fn decode(&mut self, tgt: &SeqBatch, memory: Var, src: &SeqBatch) -> Result<Var> {
        let self_mask = tgt.causal_padding_mask();
        let cross_mask = src.key_padding_mask();
        let mut x = self.embed(Side::Target, tgt, true)?;
        let layers = self.model.layout.decoder.clone();
        for (l, layer) in layers.iter().enumerate() {
            x = self.sublayer(x, layer.self_norm, |s, h| {
                s.attention(h, h, layer.self_attn, &self_mask, AttentionSite::DecoderSelf, l)
            })?;
            x = self.sublayer(x, layer.cross_norm, |s, h| {
                s.attention(h, memory, layer.cross_attn, &cross_mask, AttentionSite::Cross, l)
            })?;
            x = self.sublayer(x, layer.ff_norm, |s, h| s.feed_forward(h, layer.ff))?;
        }
        match self.model.layout.decoder_final {
            Some(n) => self.norm(x, n),
            None => Ok(x),
        }
    }

    /// Output logits `[batch, n_tgt, tgt_vocab]`.
    pub fn logits(&mut self, h: Var) -> Result<Var> {
        let layout = &self.model.layout;
        let w = match layout.out_w {
            Some(w) => self.var(w),
            None => {
                let table = self.var(layout.tgt_embed);
                let table = if self.model.config.use_fixnorm {
                    norm::fix_norm_apply(&mut self.tape, table)?
                } else {
                    table
                };
                self.tape.transpose(table)?
            }
        };
        let b = self.var(layout.out_b);
        let y = self.tape.matmul(h, w)?;
        self.tape.add(y, b)
    }

    /// Mean cross-entropy of predicting `tgt + [EOS]` from `[BOS] + tgt`,
    /// ignoring padding.
    pub fn loss(&mut self, src: &[Vec<usize>], tgt: &[Vec<usize>], label_smoothing: f64) -> Result<Var> {
        if src.len() != tgt.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sources vs {} targets",
                src.len(),
                tgt.len()
            )));
        }
        let src_ids: Vec<Vec<usize>> = src.iter().map(|s| with_eos(s)).collect();
        let tgt_in: Vec<Vec<usize>> = tgt
            .iter()
            .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect();
        let src_batch = SeqBatch::new(&src_ids)?;
        let tgt_batch = SeqBatch::new(&tgt_in)?;
        let mut targets = Vec::with_capacity(tgt_batch.batch * tgt_batch.len);
        for t in tgt {
            for i in 0..tgt_batch.len {
                targets.push(match i.cmp(&t.len()) {
                    std::cmp::Ordering::Less => Some(t[i]),
                    std::cmp::Ordering::Equal => Some(EOS),
                    std::cmp::Ordering::Greater => None,
                });
            }
        }
        let memory = self.encode(&src_batch)?;
        let h = self.decode(&tgt_batch, memory, &src_batch)?;
        let logits = self.logits(h)?;
        self.tape.cross_entropy(logits, &targets, label_smoothing)
    }
}
