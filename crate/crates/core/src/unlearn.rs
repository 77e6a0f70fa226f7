//! Unlearning by gradient ascent and its baselines.
//!
//! Every method shares one loop: pick forget sample(s) by the current
//! sampling weights, take one AdamW step on the method's objective, then
//! re-check which forget samples now sit below both early-stop bars. The loop
//! ends when every forget sample has been flagged or the step budget is spent.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RejectionPair, TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::lm::graph;
use crate::lm::train::{adamw_step, TrainingState};
use crate::lm::{LanguageModel, OptimizerConfig};
use crate::metrics::{extraction_likelihood, memorization_accuracy};
use crate::mrd::{self, EstimatorConfig, MonteCarloConfig};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sga,
    Cga,
    Graddiff,
    Npo,
    Po,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Sga, Method::Cga, Method::Graddiff, Method::Npo, Method::Po];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sga => "sga",
            Method::Cga => "cga",
            Method::Graddiff => "graddiff",
            Method::Npo => "npo",
            Method::Po => "po",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// p_i ∝ MRD_i: easy samples are drawn more often.
    #[default]
    MrdProportional,
    /// p_i ∝ 1/MRD_i.
    InverseMrdProportional,
    /// p_i = 1/N_f regardless of MRD.
    Uniform,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrd" | "mrd_proportional" => Ok(Weighting::MrdProportional),
            "inverse" | "inverse_mrd_proportional" => Ok(Weighting::InverseMrdProportional),
            "uniform" => Ok(Weighting::Uniform),
            _ => Err(Error::invalid(format!("unknown weighting {s:?}"))),
        }
    }
}

/// Update rule applied to the objective's gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// θ ← θ − η·g.
    #[default]
    Sgd,
    /// AdamW with fresh moments at the start of the run, no weight decay.
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub method: Method,
    pub update_rule: UpdateRule,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Forget samples drawn per update.
    pub batch_size: usize,
    /// Steps between MRD recomputations in CGA; `None` means max_steps / 4.
    pub mrd_refresh_interval: Option<usize>,
    pub weighting: Weighting,
    /// λ, the weight of the retain term.
    pub retain_weight: f64,
    pub retain_batch_size: usize,
    pub npo_beta: f64,
    pub seed: u64,
    /// Estimator used by CGA to compute sampling weights.
    pub estimator: EstimatorConfig,
    /// Keep drawing samples that are already flagged as forgotten.
    pub resample_forgotten: bool,
    pub clip_norm: f64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: Method::Sga,
            update_rule: UpdateRule::Sgd,
            learning_rate: 5e-5,
            max_steps: 200,
            batch_size: 1,
            mrd_refresh_interval: None,
            weighting: Weighting::MrdProportional,
            retain_weight: 1.0,
            retain_batch_size: 4,
            npo_beta: 0.1,
            seed: 0,
            estimator: EstimatorConfig::MonteCarlo(MonteCarloConfig::default()),
            resample_forgotten: true,
            clip_norm: 0.0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.mrd_refresh_interval == Some(0) {
            return Err(Error::invalid("MRD refresh interval must be at least 1"));
        }
        if !(self.retain_weight >= 0.0) {
            return Err(Error::invalid("retain_weight must be non-negative"));
        }
        if !(self.npo_beta > 0.0) {
            return Err(Error::invalid("npo_beta must be positive"));
        }
        Ok(())
    }

    /// m of the curriculum schedule.
    pub fn refresh_interval(&self) -> usize {
        self.mrd_refresh_interval.unwrap_or((self.max_steps / 4).max(1))
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        }
    }
}

/// Bars a sample must fall below to count as forgotten, fixed on the
/// pre-unlearning model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopThresholds {
    pub el_bar: f64,
    pub ma_bar: f64,
    pub n_gram: usize,
}

impl EarlyStopThresholds {
    /// Mean EL_n and mean MA of `model` over `samples`.
    pub fn from_model(model: &LanguageModel, samples: &[TokenSequence], n_gram: usize, mode: ExecMode) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("thresholds need at least one sample"));
        }
        let per = exec::try_map_indexed(mode, samples.len(), |i| {
            let x = &samples[i].tokens;
            Ok::<_, Error>((memorization_accuracy(model, x)?, extraction_likelihood(model, x, n_gram)?))
        })?;
        let n = per.len() as f64;
        Ok(EarlyStopThresholds {
            ma_bar: per.iter().map(|p| p.0).sum::<f64>() / n,
            el_bar: per.iter().map(|p| p.1).sum::<f64>() / n,
            n_gram,
        })
    }
}

/// EL_n(x) < el_bar and MA(x) < ma_bar on the current model.
pub fn early_stop_check(model: &LanguageModel, x: &[TokenId], thresholds: &EarlyStopThresholds) -> Result<bool> {
    if memorization_accuracy(model, x)? >= thresholds.ma_bar {
        return Ok(false);
    }
    Ok(extraction_likelihood(model, x, thresholds.n_gram)? < thresholds.el_bar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    pub per_sample: Vec<f64>,
}

impl SamplingWeights {
    pub fn uniform(n: usize) -> Self {
        SamplingWeights {
            per_sample: vec![1.0 / n as f64; n],
        }
    }

    /// Index whose cumulative weight first exceeds `u` ∈ [0, 1).
    pub fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &p) in self.per_sample.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.per_sample.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Normalized sampling weights from MRD values.
pub fn compute_weights(mrd_values: &[f64], scheme: Weighting) -> Result<SamplingWeights> {
    if mrd_values.is_empty() {
        return Err(Error::DegenerateWeight("no MRD values".into()));
    }
    if let Some(i) = mrd_values.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::DegenerateWeight(format!("MRD value {} at index {i}", mrd_values[i])));
    }
    let raw: Vec<f64> = match scheme {
        Weighting::MrdProportional => mrd_values.to_vec(),
        Weighting::InverseMrdProportional => mrd_values.iter().map(|v| 1.0 / v).collect(),
        Weighting::Uniform => return Ok(SamplingWeights::uniform(mrd_values.len())),
    };
    let total: f64 = raw.iter().sum();
    Ok(SamplingWeights {
        per_sample: raw.iter().map(|v| v / total).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ConstraintMet,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sample_ids: Vec<String>,
    /// Objective that was minimized.
    pub loss: f64,
    /// Mean per-token NLL of the drawn forget sample(s) before the step.
    pub forget_nll: f64,
    /// Retain-term value (per-token NLL), when the method has one and λ > 0.
    pub retain_nll: Option<f64>,
    pub update_norm: f64,
    /// Forgotten flags over the forget set after the step.
    pub forgotten: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRefresh {
    pub step: usize,
    pub mrd: Vec<f64>,
    pub weights: Vec<f64>,
    /// Weights fell back to uniform because some MRD was zero.
    pub fallback_uniform: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    /// Updates in which this sample was drawn.
    pub updates: usize,
    /// Step after which the flag was first set; 0 means already below the
    /// bars before unlearning.
    pub forgotten_at: Option<usize>,
    pub final_ma: f64,
    pub final_el: f64,
    /// Status on the final model; may differ from the frozen flag.
    pub final_forgotten: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRunLog {
    pub method: Method,
    pub weighting: Option<Weighting>,
    pub thresholds: EarlyStopThresholds,
    pub steps: Vec<StepRecord>,
    pub total_updates: usize,
    /// Mean cost of one update in FLOPs, estimated as 6·d per processed token.
    pub per_update_cost: f64,
    pub wall_seconds: f64,
    pub stop_reason: StopReason,
    pub initially_forgotten: Vec<bool>,
    pub samples: Vec<SampleOutcome>,
    pub weight_refreshes: Vec<WeightRefresh>,
}

impl UnlearnRunLog {
    pub fn forgotten_count(&self) -> usize {
        self.steps
            .last()
            .map(|s| s.forgotten.iter().filter(|&&f| f).count())
            .unwrap_or_else(|| self.initially_forgotten.iter().filter(|&&f| f).count())
    }

    /// Flags after `budget` updates (or the final flags if the run was shorter).
    pub fn forgotten_within(&self, budget: usize) -> usize {
        if budget == 0 || self.steps.is_empty() {
            return self.initially_forgotten.iter().filter(|&&f| f).count();
        }
        let i = budget.min(self.steps.len()) - 1;
        self.steps[i].forgotten.iter().filter(|&&f| f).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    /// M, total updates.
    pub m: usize,
    /// C, mean per-update cost.
    pub c: f64,
    /// E = 1/(M·C).
    pub e: f64,
}

pub fn efficiency(m: usize, c: f64) -> Result<Efficiency> {
    if m == 0 || !(c > 0.0) {
        return Err(Error::invalid("efficiency needs at least one update of positive cost"));
    }
    Ok(Efficiency {
        m,
        c,
        e: 1.0 / (m as f64 * c),
    })
}

pub fn efficiency_report(log: &UnlearnRunLog) -> Result<Efficiency> {
    if log.steps.is_empty() {
        return Err(Error::invalid("empty unlearning log"));
    }
    efficiency(log.total_updates, log.per_update_cost)
}

/// Value, forget NLL, retain NLL, scored tokens processed, and gradient of one
/// objective evaluation (the gradient of the quantity to minimize).
struct StepLoss {
    loss: f64,
    forget_nll: f64,
    retain_nll: Option<f64>,
    tokens: usize,
    grad: Vec<f64>,
}

enum Objective<'a> {
    Ascent,
    GradDiff { retain: &'a [TokenSequence] },
    Npo { retain: &'a [TokenSequence], reference: Vec<f64> },
    Po { retain: &'a [TokenSequence], pairs: &'a [RejectionPair] },
}

struct Runner<'a> {
    cfg: &'a UnlearnConfig,
    forget: &'a [TokenSequence],
    thresholds: &'a EarlyStopThresholds,
    objective: Objective<'a>,
    mode: ExecMode,
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += s * b;
    }
}

impl Runner<'_> {
    fn retain_term(
        &self,
        model: &LanguageModel,
        retain: &[TokenSequence],
        rng: &mut StreamRng,
        grad: &mut [f64],
    ) -> Result<(Option<f64>, usize)> {
        if self.cfg.retain_weight == 0.0 {
            return Ok((None, 0));
        }
        if retain.is_empty() {
            return Err(Error::invalid("retain set is empty"));
        }
        let batch: Vec<&[TokenId]> = (0..self.cfg.retain_batch_size)
            .map(|_| retain[rng.gen_range(0..retain.len())].tokens.as_slice())
            .collect();
        let (nll, g) = crate::lm::train::batch_nll_grad(model, &batch, self.mode)?;
        add_scaled(grad, &g, self.cfg.retain_weight);
        Ok((Some(nll), batch.iter().map(|x| x.len() - 1).sum()))
    }

    fn step_loss(&self, model: &LanguageModel, picks: &[usize], retain_rng: &mut StreamRng) -> Result<StepLoss> {
        let theta = model.params().values();
        let d = model.dim();
        let mut grad = vec![0.0; d];
        let (mut loss, mut forget_nll, mut tokens) = (0.0, 0.0, 0);
        let inv_b = 1.0 / picks.len() as f64;
        for &i in picks {
            let x = &self.forget[i].tokens;
            let n = (x.len() - 1) as f64;
            match &self.objective {
                Objective::Po { pairs, .. } => {
                    let p = &pairs[i];
                    let mut seq = p.prompt.clone();
                    seq.extend_from_slice(&p.target);
                    let first = p.prompt.len() - 1;
                    let (ll, g) = graph::partial_log_likelihood_grad(model, theta, &seq, first)?;
                    let nt = (seq.len() - 1 - first) as f64;
                    loss += -ll / nt * inv_b;
                    add_scaled(&mut grad, &g, -inv_b / nt);
                    let lp = crate::lm::token_log_probs(model, x)?;
                    forget_nll += -lp.sequence_total / n * inv_b;
                    tokens += seq.len() - 1 + x.len() - 1;
                }
                Objective::Npo { reference, .. } => {
                    let (ll, g) = graph::log_likelihood_grad(model, theta, x)?;
                    let beta = self.cfg.npo_beta;
                    let z = beta * (ll - reference[i]);
                    // (2/β)·log(1 + e^z) and its derivative 2·sigmoid(z)·∇ll
                    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                    let sig = 1.0 / (1.0 + (-z).exp());
                    loss += 2.0 / beta * softplus * inv_b;
                    add_scaled(&mut grad, &g, 2.0 * sig * inv_b);
                    forget_nll += -ll / n * inv_b;
                    tokens += x.len() - 1;
                }
                Objective::Ascent | Objective::GradDiff { .. } => {
                    let (ll, g) = graph::log_likelihood_grad(model, theta, x)?;
                    loss += ll / n * inv_b;
                    add_scaled(&mut grad, &g, inv_b / n);
                    forget_nll += -ll / n * inv_b;
                    tokens += x.len() - 1;
                }
            }
        }
        let retain = match &self.objective {
            Objective::Ascent => None,
            Objective::GradDiff { retain } | Objective::Npo { retain, .. } | Objective::Po { retain, .. } => {
                Some(*retain)
            }
        };
        let mut retain_nll = None;
        if let Some(r) = retain {
            let (v, t) = self.retain_term(model, r, retain_rng, &mut grad)?;
            if let Some(v) = v {
                loss += self.cfg.retain_weight * v;
            }
            retain_nll = v;
            tokens += t;
        }
        Ok(StepLoss {
            loss,
            forget_nll,
            retain_nll,
            tokens,
            grad,
        })
    }

    fn flags(&self, model: &LanguageModel, current: &[bool]) -> Result<Vec<bool>> {
        exec::try_map_indexed(self.mode, self.forget.len(), |i| {
            if current[i] {
                Ok(true)
            } else {
                early_stop_check(model, &self.forget[i].tokens, self.thresholds)
                    .map_err(|e| e.for_sample(&self.forget[i].sample_id))
            }
        })
    }

    fn weights(&self, model: &LanguageModel, step: usize) -> Result<WeightRefresh> {
        let n = self.forget.len();
        if self.cfg.weighting == Weighting::Uniform {
            return Ok(WeightRefresh {
                step,
                mrd: vec![],
                weights: SamplingWeights::uniform(n).per_sample,
                fallback_uniform: false,
            });
        }
        let master = rng::derive_seed(self.cfg.seed, &[0x3d, step as u64]);
        let mrd = exec::try_map_indexed(self.mode, n, |i| {
            let s = &self.forget[i];
            mrd::estimate(model, &s.sample_id, &s.tokens, &self.cfg.estimator, master, ExecMode::Sequential)
                .map(|e| e.value)
        })?;
        let (weights, fallback_uniform) = match compute_weights(&mrd, self.cfg.weighting) {
            Ok(w) => (w, false),
            Err(Error::DegenerateWeight(_)) => (SamplingWeights::uniform(n), true),
            Err(e) => return Err(e),
        };
        Ok(WeightRefresh {
            step,
            mrd,
            weights: weights.per_sample,
            fallback_uniform,
        })
    }

    fn run(&self, model: &mut LanguageModel, curriculum: bool) -> Result<UnlearnRunLog> {
        self.cfg.validate()?;
        if self.forget.is_empty() {
            return Err(Error::invalid("forget set is empty"));
        }
        let start = Instant::now();
        let n = self.forget.len();
        let opt = self.cfg.optimizer();
        let mut state = TrainingState::new(model.dim());
        let mut pick_rng = rng::stream(rng::derive_seed(self.cfg.seed, &[0x5a]));
        let mut retain_rng = rng::stream(rng::derive_seed(self.cfg.seed, &[0x7e]));
        let initially = self.flags(model, &vec![false; n])?;
        let mut flags = initially.clone();
        let mut forgotten_at: Vec<Option<usize>> = flags.iter().map(|&f| f.then_some(0)).collect();
        let mut updates = vec![0usize; n];
        let mut steps = Vec::new();
        let mut refreshes = Vec::new();
        let mut weights = SamplingWeights::uniform(n);
        let mut cost_sum = 0.0;
        let m = self.cfg.refresh_interval();
        for step in 0..self.cfg.max_steps {
            if flags.iter().all(|&f| f) {
                break;
            }
            if curriculum && step % m == 0 {
                let r = self.weights(model, step)?;
                weights = SamplingWeights {
                    per_sample: r.weights.clone(),
                };
                refreshes.push(r);
            }
            let effective = if self.cfg.resample_forgotten {
                weights.clone()
            } else {
                let masked: Vec<f64> =
                    weights.per_sample.iter().zip(&flags).map(|(&p, &f)| if f { 0.0 } else { p }).collect();
                let total: f64 = masked.iter().sum();
                SamplingWeights {
                    per_sample: masked.iter().map(|p| p / total).collect(),
                }
            };
            let picks: Vec<usize> = (0..self.cfg.batch_size)
                .map(|_| effective.pick(pick_rng.gen::<f64>()))
                .collect();
            let sl = self.step_loss(model, &picks, &mut retain_rng)?;
            if !sl.loss.is_finite() || sl.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numerical(format!("unlearning loss at step {}", step + 1)));
            }
            let update_norm = match self.cfg.update_rule {
                UpdateRule::Adamw => adamw_step(model.params_mut(), &sl.grad, &mut state, &opt),
                UpdateRule::Sgd => sgd_step(model.params_mut(), &sl.grad, self.cfg.learning_rate, self.cfg.clip_norm),
            };
            cost_sum += 6.0 * model.dim() as f64 * sl.tokens as f64;
            for &i in &picks {
                updates[i] += 1;
            }
            flags = self.flags(model, &flags)?;
            for i in 0..n {
                if flags[i] && forgotten_at[i].is_none() {
                    forgotten_at[i] = Some(step + 1);
                }
            }
            steps.push(StepRecord {
                step: step + 1,
                sample_ids: picks.iter().map(|&i| self.forget[i].sample_id.clone()).collect(),
                loss: sl.loss,
                forget_nll: sl.forget_nll,
                retain_nll: sl.retain_nll,
                update_norm,
                forgotten: flags.clone(),
            });
        }
        let samples = exec::try_map_indexed(self.mode, n, |i| {
            let s = &self.forget[i];
            let ma = memorization_accuracy(model, &s.tokens)?;
            let el = extraction_likelihood(model, &s.tokens, self.thresholds.n_gram)?;
            Ok::<_, Error>(SampleOutcome {
                sample_id: s.sample_id.clone(),
                updates: updates[i],
                forgotten_at: forgotten_at[i],
                final_ma: ma,
                final_el: el,
                final_forgotten: ma < self.thresholds.ma_bar && el < self.thresholds.el_bar,
            })
        })?;
        let total_updates = steps.len();
        Ok(UnlearnRunLog {
            method: self.cfg.method,
            weighting: curriculum.then_some(self.cfg.weighting),
            thresholds: *self.thresholds,
            total_updates,
            per_update_cost: if total_updates > 0 { cost_sum / total_updates as f64 } else { 0.0 },
            wall_seconds: start.elapsed().as_secs_f64(),
            stop_reason: if flags.iter().all(|&f| f) {
                StopReason::ConstraintMet
            } else {
                StopReason::BudgetExhausted
            },
            initially_forgotten: initially,
            samples,
            weight_refreshes: refreshes,
            steps,
        })
    }
}

/// θ ← θ − η·g with optional global-norm clipping; returns the update norm.
fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64, clip_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if clip_norm > 0.0 && norm > clip_norm { lr * clip_norm / norm } else { lr };
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= scale * g;
    }
    scale * norm
}

/// Stochastic gradient ascent with uniform sampling over the forget set.
pub fn run_sga(
    model: &mut LanguageModel,
    forget: &[TokenSequence],
    cfg: &UnlearnConfig,
    thresholds: &EarlyStopThresholds,
) -> Result<UnlearnRunLog> {
    Runner {
        cfg,
        forget,
        thresholds,
        objective: Objective::Ascent,
        mode: ExecMode::best(),
    }
    .run(model, false)
}

/// Curriculum gradient ascent: sampling weights from MRD, recomputed every
/// m steps.
pub fn run_cga(
    model: &mut LanguageModel,
    forget: &[TokenSequence],
    cfg: &UnlearnConfig,
    thresholds: &EarlyStopThresholds,
) -> Result<UnlearnRunLog> {
    Runner {
        cfg,
        forget,
        thresholds,
        objective: Objective::Ascent,
        mode: ExecMode::best(),
    }
    .run(model, true)
}

/// Ascent on the forget sample plus λ times descent on a retain batch.
pub fn run_graddiff(
    model: &mut LanguageModel,
    forget: &[TokenSequence],
    retain: &[TokenSequence],
    cfg: &UnlearnConfig,
    thresholds: &EarlyStopThresholds,
) -> Result<UnlearnRunLog> {
    Runner {
        cfg,
        forget,
        thresholds,
        objective: Objective::GradDiff { retain },
        mode: ExecMode::best(),
    }
    .run(model, false)
}

/// NPO forget loss of a sequence, (2/β)·log(1 + (p_θ(x)/p_ref(x))^β), from
/// the two sequence log-likelihoods.
pub fn npo_forget_loss(log_p_theta: f64, log_p_ref: f64, beta: f64) -> f64 {
    let z = beta * (log_p_theta - log_p_ref);
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    2.0 / beta * softplus
}

/// Negative preference optimization against a frozen reference model.
pub fn run_npo(
    model: &mut LanguageModel,
    reference: &LanguageModel,
    forget: &[TokenSequence],
    retain: &[TokenSequence],
    cfg: &UnlearnConfig,
    thresholds: &EarlyStopThresholds,
) -> Result<UnlearnRunLog> {
    let reference: Vec<f64> = forget
        .iter()
        .map(|s| crate::lm::token_log_probs(reference, &s.tokens).map(|lp| lp.sequence_total))
        .collect::<Result<_>>()?;
    Runner {
        cfg,
        forget,
        thresholds,
        objective: Objective::Npo { retain, reference },
        mode: ExecMode::best(),
    }
    .run(model, false)
}

/// Supervised training toward rejection targets; `pairs[i]` belongs to
/// `forget[i]`, whose original continuation is still used for stopping.
pub fn run_po(
    model: &mut LanguageModel,
    forget: &[TokenSequence],
    pairs: &[RejectionPair],
    retain: &[TokenSequence],
    cfg: &UnlearnConfig,
    thresholds: &EarlyStopThresholds,
) -> Result<UnlearnRunLog> {
    if pairs.len() != forget.len() {
        return Err(Error::invalid("every forget sample needs one rejection pair"));
    }
    for (p, s) in pairs.iter().zip(forget) {
        if p.sample_id != s.sample_id || p.prompt.is_empty() || p.target.is_empty() {
            return Err(Error::invalid(format!("bad rejection pair for {}", s.sample_id)));
        }
    }
    Runner {
        cfg,
        forget,
        thresholds,
        objective: Objective::Po { retain, pairs },
        mode: ExecMode::best(),
    }
    .run(model, false)
}

/// Dispatch on `cfg.method`. NPO needs `reference`, PO needs `pairs`.
pub fn run_method(
    model: &mut LanguageModel,
    reference: Option<&LanguageModel>,
    forget: &[TokenSequence],
    retain: &[TokenSequence],
    pairs: Option<&[RejectionPair]>,
    cfg: &UnlearnConfig,
    thresholds: &EarlyStopThresholds,
) -> Result<UnlearnRunLog> {
    match cfg.method {
        Method::Sga => run_sga(model, forget, cfg, thresholds),
        Method::Cga => run_cga(model, forget, cfg, thresholds),
        Method::Graddiff => run_graddiff(model, forget, retain, cfg, thresholds),
        Method::Npo => {
            let r = reference.ok_or_else(|| Error::invalid("NPO needs a reference model"))?;
            run_npo(model, r, forget, retain, cfg, thresholds)
        }
        Method::Po => {
            let p = pairs.ok_or_else(|| Error::invalid("PO needs rejection targets"))?;
            run_po(model, forget, p, retain, cfg, thresholds)
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum RunLogLine {
    Step(StepRecord),
    Summary(RunSummary),
}

/// Final line of a run-log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub weighting: Option<Weighting>,
    pub thresholds: EarlyStopThresholds,
    #[serde(rename = "M")]
    pub total_updates: usize,
    #[serde(rename = "C")]
    pub per_update_cost: f64,
    #[serde(rename = "E")]
    pub efficiency: Option<f64>,
    pub wall_seconds: f64,
    pub stop_reason: StopReason,
    pub forgotten: usize,
    pub initially_forgotten: Vec<bool>,
    pub samples: Vec<SampleOutcome>,
    pub weight_refreshes: Vec<WeightRefresh>,
}

/// JSON lines: one `step` record per update, then one `summary` record.
pub fn write_run_log(log: &UnlearnRunLog, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in &log.steps {
        serde_json::to_writer(&mut f, &RunLogLine::Step(s.clone()))?;
        f.write_all(b"\n")?;
    }
    let summary = RunSummary {
        method: log.method,
        weighting: log.weighting,
        thresholds: log.thresholds,
        total_updates: log.total_updates,
        per_update_cost: log.per_update_cost,
        efficiency: efficiency_report(log).ok().map(|e| e.e),
        wall_seconds: log.wall_seconds,
        stop_reason: log.stop_reason,
        forgotten: log.forgotten_count(),
        initially_forgotten: log.initially_forgotten.clone(),
        samples: log.samples.clone(),
        weight_refreshes: log.weight_refreshes.clone(),
    };
    serde_json::to_writer(&mut f, &RunLogLine::Summary(summary))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_run_log(path: impl AsRef<Path>) -> Result<UnlearnRunLog> {
    let text = std::fs::read_to_string(path)?;
    let mut steps = Vec::new();
    let mut summary = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        if summary.is_some() {
            return Err(Error::Load(format!("line {}: record after the summary", i + 1)));
        }
        match serde_json::from_str(line).map_err(|e| Error::Load(format!("line {}: {e}", i + 1)))? {
            RunLogLine::Step(s) => steps.push(s),
            RunLogLine::Summary(s) => summary = Some(s),
        }
    }
    let s = summary.ok_or_else(|| Error::Load("run log has no summary record".into()))?;
    if s.total_updates != steps.len() {
        return Err(Error::Load(format!("summary M = {} but {} step records", s.total_updates, steps.len())));
    }
    Ok(UnlearnRunLog {
        method: s.method,
        weighting: s.weighting,
        thresholds: s.thresholds,
        steps,
        total_updates: s.total_updates,
        per_update_cost: s.per_update_cost,
        wall_seconds: s.wall_seconds,
        stop_reason: s.stop_reason,
        initially_forgotten: s.initially_forgotten,
        samples: s.samples,
        weight_refreshes: s.weight_refreshes,
    })
}

/// Per-sample update counts keyed by sample id.
pub fn updates_by_sample(log: &UnlearnRunLog) -> HashMap<String, usize> {
    log.samples.iter().map(|s| (s.sample_id.clone(), s.updates)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_examples() {
        let w = compute_weights(&[1.0, 3.0], Weighting::MrdProportional).unwrap();
        assert_eq!(w.per_sample, vec![0.25, 0.75]);
        let w = compute_weights(&[1.0, 3.0], Weighting::InverseMrdProportional).unwrap();
        assert!((w.per_sample[0] - 0.75).abs() < 1e-15 && (w.per_sample[1] - 0.25).abs() < 1e-15);
        for scheme in [Weighting::MrdProportional, Weighting::InverseMrdProportional] {
            let w = compute_weights(&[0.4; 5], scheme).unwrap();
            assert!(w.per_sample.iter().all(|p| (p - 0.2).abs() < 1e-15));
        }
        assert!(matches!(compute_weights(&[1.0, 0.0], Weighting::MrdProportional), Err(Error::DegenerateWeight(_))));
    }

    #[test]
    fn pick_follows_cumulative_weights() {
        let w = SamplingWeights { per_sample: vec![0.25, 0.0, 0.75] };
        assert_eq!(w.pick(0.0), 0);
        assert_eq!(w.pick(0.2499), 0);
        assert_eq!(w.pick(0.25), 2);
        assert_eq!(w.pick(0.999_999_999_999), 2);
        assert_eq!(SamplingWeights::uniform(1).pick(0.7), 0);
    }

    #[test]
    fn efficiency_arithmetic() {
        let e = efficiency(10, 2.0).unwrap();
        assert_eq!(e.e, 0.05);
        assert!(efficiency(20, 2.0).unwrap().e < e.e);
        assert!(efficiency(0, 2.0).is_err());
    }

    #[test]
    fn npo_loss_identities() {
        let beta = 0.1;
        assert!((npo_forget_loss(-3.0, -3.0, beta) - 2.0 / beta * 2f64.ln()).abs() < 1e-12);
        assert!(npo_forget_loss(-500.0, -3.0, 50.0) < 1e-12);
    }

    #[test]
    fn names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("inverse".parse::<Weighting>().unwrap(), Weighting::InverseMrdProportional);
        assert!("x".parse::<Weighting>().is_err());
    }
}
