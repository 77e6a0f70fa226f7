//! Maximum-likelihood training with decoupled-weight-decay Adam.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{graph, LanguageModel, LmConfig};
use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 8,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl TrainingState {
    pub fn new(d: usize) -> Self {
        TrainingState {
            m: vec![0.0; d],
            v: vec![0.0; d],
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.step = 0;
    }
}

/// One AdamW step minimizing the loss whose gradient is `grad`.
/// Returns the L2 norm of the parameter update.
pub fn adamw_step(params: &mut [f64], grad: &[f64], state: &mut TrainingState, opt: &OptimizerConfig) -> f64 {
    let mut scale = 1.0;
    if opt.clip_norm > 0.0 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > opt.clip_norm {
            scale = opt.clip_norm / norm;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let mut sq = 0.0;
    for i in 0..params.len() {
        let g = grad[i] * scale;
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        let upd = opt.learning_rate * (mhat / (vhat.sqrt() + opt.eps) + opt.weight_decay * params[i]);
        params[i] -= upd;
        sq += upd * upd;
    }
    sq.sqrt()
}

/// Mean negative log-likelihood per scored token over `batch`, and its gradient.
pub fn batch_nll_grad(
    model: &LanguageModel,
    batch: &[&[TokenId]],
    mode: ExecMode,
) -> Result<(f64, Vec<f64>)> {
    let theta = model.params().values();
    let parts = exec::try_map_indexed(mode, batch.len(), |i| graph::log_likelihood_grad(model, theta, batch[i]))?;
    let tokens: usize = batch.iter().map(|x| x.len() - 1).sum();
    let mut grad = vec![0.0; model.dim()];
    let mut ll = 0.0;
    for (v, g) in parts {
        ll += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a -= b;
        }
    }
    let inv = 1.0 / tokens as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((-ll * inv, grad))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token NLL of each epoch, averaged over its minibatches.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

/// Fit a fresh model to every training sequence of `corpus` (both splits,
/// duplicated according to each sample's replication count).
pub fn train(corpus: &Corpus, config: LmConfig, opt: &OptimizerConfig) -> Result<(LanguageModel, TrainReport)> {
    let stream = corpus.training_stream();
    train_sequences(&stream, config, opt)
}

pub fn train_sequences(
    stream: &[&[TokenId]],
    config: LmConfig,
    opt: &OptimizerConfig,
) -> Result<(LanguageModel, TrainReport)> {
    let mut model = LanguageModel::init(config)?;
    let report = continue_training(&mut model, stream, opt)?;
    Ok((model, report))
}

/// Run `opt.epochs` more epochs on an existing model.
pub fn continue_training(model: &mut LanguageModel, stream: &[&[TokenId]], opt: &OptimizerConfig) -> Result<TrainReport> {
    opt.validate()?;
    if stream.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    for x in stream {
        model.check_tokens(x, 2)?;
    }
    let mut order: Vec<usize> = (0..stream.len()).collect();
    let mut report = TrainReport::default();
    let mut state = std::mem::replace(&mut model.training_state, TrainingState::new(0));
    for epoch in 0..opt.epochs {
        let mut shuffle = rng::stream(rng::derive_seed(opt.seed, &[epoch as u64]));
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<&[TokenId]> = chunk.iter().map(|&i| stream[i]).collect();
            let (loss, grad) = batch_nll_grad(model, &batch, ExecMode::best())?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!("training loss at step {}", state.step + 1)));
            }
            adamw_step(model.params_mut(), &grad, &mut state, opt);
            loss_sum += loss;
            batches += 1;
        }
        report.epoch_loss.push(loss_sum / batches as f64);
    }
    report.steps = state.step;
    model.training_state = state;
    Ok(report)
}
