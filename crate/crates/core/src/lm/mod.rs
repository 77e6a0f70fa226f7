//! Miniature decoder-only transformer language model.
//!
//! Token and position embeddings, pre-norm blocks with causal multi-head
//! attention and a GELU MLP, a final layer norm and an output projection tied
//! to the token embedding.
//!
//! Every sequence is fed as `[BOS, x_1, .., x_{n-1}]` and the model scores
//! `x_2 .. x_n`: position `t` of [`TokenLogProbs`] holds
//! `log p(x_{t+2} | BOS, x_1 .. x_{t+1})`. The first real token is never scored
//! since nothing in the corpus determines it.
//!
//! Two forward implementations exist. [`graph`] records a differentiable tape
//! and is used wherever gradients are needed; [`infer`] is a tape-free,
//! token-at-a-time evaluator with a key/value cache, generic over
//! [`scalar::Scalar`] so the same code also runs on dual numbers. Tests pin the
//! two to each other.

pub mod checkpoint;
pub mod graph;
pub mod infer;
pub mod scalar;
pub mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::rng;
use crate::tensor::{Layout, ParamVector};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train, OptimizerConfig, TrainReport, TrainingState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 64,
            context_length: 64,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if self.context_length < 2 {
            return Err(Error::invalid("context_length must be at least 2"));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.vocab_size <= BOS as usize {
            return Err(Error::invalid("vocab_size must leave room for EOS and BOS"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Parameter blocks in flat-vector order.
    pub fn layout(&self) -> Layout {
        let (v, c, d, h) = (self.vocab_size, self.context_length, self.embed_dim, self.mlp_dim());
        let mut blocks: Vec<(String, Vec<usize>)> = vec![
            ("tok_emb".into(), vec![v, d]),
            ("pos_emb".into(), vec![c, d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            blocks.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w1"), vec![d, h]),
                (p("mlp.b1"), vec![h]),
                (p("mlp.w2"), vec![h, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        blocks.push(("lnf.gain".into(), vec![d]));
        blocks.push(("lnf.bias".into(), vec![d]));
        Layout::from_shapes(blocks)
    }

    pub fn param_count(&self) -> usize {
        self.layout().dim()
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl Offsets {
    pub fn new(cfg: &LmConfig, layout: &Layout) -> Self {
        let at = |name: &str| {
            layout
                .segment(name)
                .unwrap_or_else(|| panic!("layout lacks block {name}"))
                .offset
        };
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = |s: &str| at(&format!("layer{l}.{s}"));
                LayerOffsets {
                    ln1_gain: p("ln1.gain"),
                    ln1_bias: p("ln1.bias"),
                    wq: p("attn.wq"),
                    wk: p("attn.wk"),
                    wv: p("attn.wv"),
                    wo: p("attn.wo"),
                    ln2_gain: p("ln2.gain"),
                    ln2_bias: p("ln2.bias"),
                    w1: p("mlp.w1"),
                    b1: p("mlp.b1"),
                    w2: p("mlp.w2"),
                    b2: p("mlp.b2"),
                }
            })
            .collect();
        Offsets {
            tok_emb: at("tok_emb"),
            pos_emb: at("pos_emb"),
            layers,
            lnf_gain: at("lnf.gain"),
            lnf_bias: at("lnf.bias"),
        }
    }
}

/// A model: configuration, parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    config: LmConfig,
    params: ParamVector,
    offsets: Arc<Offsets>,
    pub training_state: TrainingState,
}

impl LanguageModel {
    /// Freshly initialised model, seeded from `config.seed`.
    pub fn init(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(config.layout());
        let mut values = vec![0.0; layout.dim()];
        let mut stream = rng::stream(rng::derive_seed(config.seed, &[0x1a17]));
        let d = config.embed_dim as f64;
        let resid_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        for seg in layout.segments() {
            let slice = &mut values[seg.range()];
            let name = seg.name.as_str();
            if name.ends_with(".gain") {
                slice.fill(1.0);
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                slice.fill(0.0);
            } else {
                let fan_in = seg.shape[0] as f64;
                let std = match name {
                    "tok_emb" | "pos_emb" => 0.1,
                    _ if name.ends_with(".wo") || name.ends_with(".w2") => resid_scale / fan_in.sqrt(),
                    _ => 1.0 / d.sqrt().max(fan_in.sqrt()),
                };
                rng::fill_standard_normal(&mut stream, slice);
                for v in slice.iter_mut() {
                    *v *= std;
                }
            }
        }
        let params = ParamVector::new(layout.clone(), values)?;
        Ok(Self::from_parts(config, params))
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamVector::zeros(Arc::new(config.layout()));
        Ok(Self::from_parts(config, params))
    }

    pub(crate) fn from_parts(config: LmConfig, params: ParamVector) -> Self {
        let offsets = Arc::new(Offsets::new(&config, params.layout()));
        let d = params.dim();
        LanguageModel {
            config,
            params,
            offsets,
            training_state: TrainingState::new(d),
        }
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub(crate) fn offsets(&self) -> &Offsets {
        &self.offsets
    }

    /// Copy of this model with parameters replaced.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.layout() != self.params.layout() && **params.layout() != **self.params.layout() {
            return Err(Error::contract("parameter layout differs from the model's"));
        }
        Ok(LanguageModel {
            config: self.config.clone(),
            params,
            offsets: self.offsets.clone(),
            training_state: self.training_state.clone(),
        })
    }

    pub fn set_params(&mut self, values: Vec<f64>) -> Result<()> {
        self.params = ParamVector::new(self.params.layout().clone(), values)?;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        self.params.values_mut()
    }

    /// Check a sequence that will be scored or fed as a prefix.
    pub(crate) fn check_tokens(&self, x: &[TokenId], min_len: usize) -> Result<()> {
        if x.len() < min_len {
            return Err(Error::invalid(format!(
                "sequence of length {} is shorter than {min_len}",
                x.len()
            )));
        }
        if x.len() > self.config.context_length {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds context length {}",
                x.len(),
                self.config.context_length
            )));
        }
        if let Some(&bad) = x.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Per-position log-likelihoods of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub per_token: Vec<f64>,
    pub sequence_total: f64,
}

impl TokenLogProbs {
    pub fn new(per_token: Vec<f64>) -> Self {
        let sequence_total = per_token.iter().sum();
        TokenLogProbs {
            per_token,
            sequence_total,
        }
    }

    pub fn len(&self) -> usize {
        self.per_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token.is_empty()
    }
}

/// `log p(x_t | x_<t)` for every scored position of `x`.
pub fn token_log_probs(model: &LanguageModel, x: &[TokenId]) -> Result<TokenLogProbs> {
    token_log_probs_at(model, model.params().values(), x)
}

/// As [`token_log_probs`] but with the parameters replaced by `theta`.
pub fn token_log_probs_at(model: &LanguageModel, theta: &[f64], x: &[TokenId]) -> Result<TokenLogProbs> {
    model.check_tokens(x, 2)?;
    if theta.len() != model.dim() {
        return Err(Error::contract(format!(
            "parameter vector of length {} for a model of dimension {}",
            theta.len(),
            model.dim()
        )));
    }
    let lp = infer::scored_log_probs(model, theta, x);
    if let Some(t) = lp.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("log-probability at position {t}")));
    }
    Ok(TokenLogProbs::new(lp))
}

/// Scores many sequences; identical to calling [`token_log_probs`] on each.
pub fn token_log_probs_batch(
    model: &LanguageModel,
    xs: &[&[TokenId]],
    mode: ExecMode,
) -> Result<Vec<TokenLogProbs>> {
    exec::try_map_indexed(mode, xs.len(), |i| token_log_probs(model, xs[i]))
}

/// Argmax continuation of `prefix`, at most `max_new` tokens, stopping after EOS
/// or when the context is full. The returned sequence includes the prefix.
pub fn greedy_decode(model: &LanguageModel, prefix: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    model.check_tokens(prefix, 1)?;
    let mut out = prefix.to_vec();
    if max_new == 0 {
        return Ok(out);
    }
    if prefix.len() >= model.config.context_length {
        return Err(Error::invalid(format!(
            "prefix of length {} leaves no room to generate within context length {}",
            prefix.len(),
            model.config.context_length
        )));
    }
    let mut dec = infer::Decoder::new(model, model.params().values());
    dec.push(BOS);
    let mut logits = Vec::new();
    for &t in prefix {
        logits = dec.push(t);
    }
    for _ in 0..max_new {
        let next = argmax(&logits) as TokenId;
        out.push(next);
        // the next token occupies position len(out); BOS takes position 0
        if next == EOS || out.len() >= model.config.context_length {
            break;
        }
        logits = dec.push(next);
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
