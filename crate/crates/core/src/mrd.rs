//! Memory removal difficulty.
//!
//! Three estimators of how strongly a sample's per-token log-likelihoods
//! react to a small Gaussian perturbation of the parameters:
//!
//! * [`mrd_naive`]: `|Σ_t (P_t(θ) − P_t(θ+δ))|` for one given δ;
//! * [`mrd_monte_carlo`]: mean over K draws of `|Σ_t (P_t(θ) − P_t(θ+δ_k)) / P_t(θ)|`;
//! * [`mrd_hessian_approx`]: `|(σ²/2) Σ_t Tr(H_t) / P_t(θ)|`, with the traces
//!   from [`hutchinson_trace`].
//!
//! Estimators work against the [`TokenScorer`] trait so analytic surrogates
//! with known curvature can stand in for the language model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::lm::{infer, LanguageModel};
use crate::rng;
use crate::tensor::{gaussian_perturbation, rademacher_probe, Perturbation};

/// Default |P_t| floor of the relative form.
pub const P_FLOOR: f64 = 1e-8;
pub const DEFAULT_SIGMA: f64 = 1e-5;
pub const DEFAULT_K: usize = 200;
pub const DEFAULT_PROBES: usize = 64;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Something that assigns per-position log-likelihoods to a token sequence as
/// a function of a flat parameter vector.
pub trait TokenScorer: Sync {
    fn dim(&self) -> usize;

    /// Current parameters θ.
    fn theta(&self) -> &[f64];

    /// P_t at `theta` for every scored position of `x`.
    fn log_probs_at(&self, theta: &[f64], x: &[TokenId]) -> Result<Vec<f64>>;

    /// (P_t, vᵀ∇P_t) at `theta` for every scored position.
    fn log_probs_jvp(&self, theta: &[f64], v: &[f64], x: &[TokenId]) -> Result<(Vec<f64>, Vec<f64>)>;

    fn log_probs(&self, x: &[TokenId]) -> Result<Vec<f64>> {
        self.log_probs_at(self.theta(), x)
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(t) => Err(Error::numerical(format!("{what} at position {t}"))),
        None => Ok(()),
    }
}

impl TokenScorer for LanguageModel {
    fn dim(&self) -> usize {
        LanguageModel::dim(self)
    }

    fn theta(&self) -> &[f64] {
        self.params().values()
    }

    fn log_probs_at(&self, theta: &[f64], x: &[TokenId]) -> Result<Vec<f64>> {
        Ok(crate::lm::token_log_probs_at(self, theta, x)?.per_token)
    }

    fn log_probs_jvp(&self, theta: &[f64], v: &[f64], x: &[TokenId]) -> Result<(Vec<f64>, Vec<f64>)> {
        crate::lm::token_log_probs_at(self, theta, x)?;
        if v.len() != theta.len() {
            return Err(Error::contract("direction and parameter dimensions differ"));
        }
        let (p, dp) = infer::scored_log_probs_jvp(self, theta, v, x);
        check_finite(&dp, "directional derivative")?;
        Ok((p, dp))
    }
}

/// P_t(θ) = c + bᵀθ + ½θᵀAθ at each of `positions` scored positions, with a
/// symmetric A. Its Hessian is A at every position.
#[derive(Debug, Clone)]
pub struct QuadraticScorer {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
    pub theta: Vec<f64>,
    pub positions: usize,
}

impl QuadraticScorer {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: f64, theta: Vec<f64>, positions: usize) -> Result<Self> {
        let d = theta.len();
        if a.len() != d * d || b.len() != d {
            return Err(Error::contract("quadratic scorer dimensions disagree"));
        }
        for i in 0..d {
            for j in 0..i {
                if a[i * d + j] != a[j * d + i] {
                    return Err(Error::invalid("quadratic scorer matrix must be symmetric"));
                }
            }
        }
        Ok(QuadraticScorer {
            a,
            b,
            c,
            theta,
            positions,
        })
    }

    pub fn diagonal(diag: &[f64], c: f64, theta: Vec<f64>, positions: usize) -> Result<Self> {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for (i, &v) in diag.iter().enumerate() {
            a[i * d + i] = v;
        }
        Self::new(a, vec![0.0; d], c, theta, positions)
    }

    pub fn trace(&self) -> f64 {
        let d = self.theta.len();
        (0..d).map(|i| self.a[i * d + i]).sum()
    }

    fn a_times(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| self.a[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let at = self.a_times(theta);
        let quad: f64 = theta.iter().zip(&at).map(|(a, b)| a * b).sum();
        let lin: f64 = theta.iter().zip(&self.b).map(|(a, b)| a * b).sum();
        self.c + lin + 0.5 * quad
    }
}

impl TokenScorer for QuadraticScorer {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn log_probs_at(&self, theta: &[f64], _x: &[TokenId]) -> Result<Vec<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::contract("parameter dimension mismatch"));
        }
        Ok(vec![self.value(theta); self.positions])
    }

    fn log_probs_jvp(&self, theta: &[f64], v: &[f64], x: &[TokenId]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.log_probs_at(theta, x)?;
        let at = self.a_times(theta);
        let dp: f64 = v.iter().zip(self.b.iter().zip(&at)).map(|(v, (b, a))| v * (b + a)).sum();
        Ok((p, vec![dp; self.positions]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Naive,
    MonteCarlo,
    HessianApprox,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Naive => "naive",
            Estimator::MonteCarlo => "monte_carlo",
            Estimator::HessianApprox => "hessian_approx",
        })
    }
}

/// What to do with positions whose |P_t| is below the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorPolicy {
    /// Drop them from the sum and record them in the estimate.
    #[default]
    Exclude,
    /// Fail with [`Error::DegenerateToken`].
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdEstimate {
    pub value: f64,
    pub estimator: Estimator,
    pub sigma: f64,
    /// Monte-Carlo repetitions; 0 for the other estimators.
    pub k: usize,
    pub std_error: f64,
    pub seed: u64,
    /// Hutchinson probes behind a Hessian approximation; 0 otherwise.
    pub probes: usize,
    pub fd_step: f64,
    /// Scored positions dropped by the |P_t| floor.
    pub excluded_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub per_token: Vec<f64>,
    /// Standard error of each per-token mean over probes.
    pub std_error: Vec<f64>,
    pub probes: usize,
    pub fd_step: f64,
    pub seed: u64,
}

/// Positions kept by the floor, or the error the policy asks for.
fn floor_mask(p: &[f64], p_floor: f64, policy: FloorPolicy) -> Result<(Vec<bool>, Vec<usize>)> {
    let mut keep = Vec::with_capacity(p.len());
    let mut excluded = Vec::new();
    for (t, &v) in p.iter().enumerate() {
        let ok = v.abs() >= p_floor;
        if !ok {
            if policy == FloorPolicy::Error {
                return Err(Error::DegenerateToken { position: t, value: v.abs() });
            }
            excluded.push(t);
        }
        keep.push(ok);
    }
    if excluded.len() == p.len() {
        let t = excluded[0];
        return Err(Error::DegenerateToken { position: t, value: p[t].abs() });
    }
    Ok((keep, excluded))
}

/// θ + scale·v as a fresh vector.
fn shifted(theta: &[f64], v: &[f64], scale: f64) -> Result<Vec<f64>> {
    if theta.len() != v.len() {
        return Err(Error::contract(format!(
            "perturbation of dimension {} for parameters of dimension {}",
            v.len(),
            theta.len()
        )));
    }
    Ok(theta.iter().zip(v).map(|(a, b)| a + scale * b).collect())
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `|Σ_t (P_t(θ) − P_t(θ+δ))|` for the given δ.
pub fn mrd_naive<S: TokenScorer + ?Sized>(scorer: &S, x: &[TokenId], delta: &Perturbation) -> Result<f64> {
    let theta = scorer.theta();
    let perturbed = shifted(theta, &delta.delta, 1.0)?;
    let base = scorer.log_probs(x)?;
    let moved = scorer.log_probs_at(&perturbed, x)?;
    Ok(base.iter().zip(&moved).map(|(a, b)| a - b).sum::<f64>().abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub sigma: f64,
    pub k: usize,
    pub p_floor: f64,
    pub floor_policy: FloorPolicy,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            sigma: DEFAULT_SIGMA,
            k: DEFAULT_K,
            p_floor: P_FLOOR,
            floor_policy: FloorPolicy::Exclude,
        }
    }
}

/// Seed of the k-th perturbation drawn for a sample.
pub fn perturbation_seed(sample_seed: u64, k: usize) -> u64 {
    rng::derive_seed(sample_seed, &[k as u64])
}

/// Monte-Carlo MRD: the mean over k of `|Σ_t (P_t(θ) − P_t(θ+δ_k)) / P_t(θ)|`
/// with δ_k ~ N(0, σ²I) seeded by `(seed, k)`.
pub fn mrd_monte_carlo<S: TokenScorer + ?Sized>(
    scorer: &S,
    x: &[TokenId],
    cfg: &MonteCarloConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<MrdEstimate> {
    if cfg.k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if !(cfg.sigma > 0.0 && cfg.sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {}", cfg.sigma)));
    }
    let theta = scorer.theta();
    let base = scorer.log_probs(x)?;
    let (keep, excluded) = floor_mask(&base, cfg.p_floor, cfg.floor_policy)?;
    let draws = exec::try_map_indexed(mode, cfg.k, |k| -> Result<f64> {
        let delta = gaussian_perturbation(scorer.dim(), cfg.sigma, perturbation_seed(seed, k))?;
        let moved = scorer.log_probs_at(&shifted(theta, &delta.delta, 1.0)?, x)?;
        let mut sum = 0.0;
        for t in 0..base.len() {
            if keep[t] {
                sum += (base[t] - moved[t]) / base[t];
            }
        }
        Ok(sum.abs())
    })?;
    let (value, std_error) = mean_and_se(&draws);
    Ok(MrdEstimate {
        value,
        estimator: Estimator::MonteCarlo,
        sigma: cfg.sigma,
        k: cfg.k,
        std_error,
        seed,
        probes: 0,
        fd_step: 0.0,
        excluded_positions: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub probes: usize,
    pub fd_step: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            probes: DEFAULT_PROBES,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

/// Hutchinson estimate of Tr(H_t) per scored position: the mean over
/// Rademacher probes v of `vᵀ(∇P_t(θ+hv) − ∇P_t(θ−hv)) / 2h`.
pub fn hutchinson_trace<S: TokenScorer + ?Sized>(
    scorer: &S,
    x: &[TokenId],
    cfg: &TraceConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<TraceEstimate> {
    if cfg.probes == 0 {
        return Err(Error::invalid("at least one probe is needed"));
    }
    if !(cfg.fd_step > 0.0 && cfg.fd_step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {}", cfg.fd_step)));
    }
    let theta = scorer.theta();
    let samples = exec::try_map_indexed(mode, cfg.probes, |i| -> Result<Vec<f64>> {
        let v = rademacher_probe(scorer.dim(), rng::derive_seed(seed, &[i as u64]))?;
        let plus = shifted(theta, &v, cfg.fd_step)?;
        let minus = shifted(theta, &v, -cfg.fd_step)?;
        let annotate = |e: Error| match e {
            Error::NumericalFailure { context } => Error::numerical(format!("{context}, probe {i}")),
            other => other,
        };
        let (_, gp) = scorer.log_probs_jvp(&plus, &v, x).map_err(annotate)?;
        let (_, gm) = scorer.log_probs_jvp(&minus, &v, x).map_err(annotate)?;
        let est: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * cfg.fd_step)).collect();
        if let Some(t) = est.iter().position(|e| !e.is_finite()) {
            return Err(Error::numerical(format!("Hessian probe at position {t}, probe {i}")));
        }
        Ok(est)
    })?;
    let n = samples[0].len();
    let mut per_token = Vec::with_capacity(n);
    let mut std_error = Vec::with_capacity(n);
    for t in 0..n {
        let col: Vec<f64> = samples.iter().map(|s| s[t]).collect();
        let (m, se) = mean_and_se(&col);
        per_token.push(m);
        std_error.push(se);
    }
    Ok(TraceEstimate {
        per_token,
        std_error,
        probes: cfg.probes,
        fd_step: cfg.fd_step,
        seed,
    })
}

/// `|(σ²/2) Σ_t Tr(H_t) / P_t(θ)|` over the positions kept by the floor.
pub fn mrd_hessian_approx<S: TokenScorer + ?Sized>(
    scorer: &S,
    x: &[TokenId],
    sigma: f64,
    trace: &TraceEstimate,
    p_floor: f64,
    policy: FloorPolicy,
) -> Result<MrdEstimate> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let base = scorer.log_probs(x)?;
    if trace.per_token.len() != base.len() {
        return Err(Error::contract(format!(
            "trace covers {} positions, sequence has {}",
            trace.per_token.len(),
            base.len()
        )));
    }
    let (keep, excluded) = floor_mask(&base, p_floor, policy)?;
    let (mut sum, mut var) = (0.0, 0.0);
    for t in 0..base.len() {
        if keep[t] {
            sum += trace.per_token[t] / base[t];
            var += (trace.std_error[t] / base[t]).powi(2);
        }
    }
    let half = 0.5 * sigma * sigma;
    Ok(MrdEstimate {
        value: (half * sum).abs(),
        estimator: Estimator::HessianApprox,
        sigma,
        k: 0,
        std_error: half * var.sqrt(),
        seed: trace.seed,
        probes: trace.probes,
        fd_step: trace.fd_step,
        excluded_positions: excluded,
    })
}

/// Estimator choice for ranking and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum EstimatorConfig {
    MonteCarlo(MonteCarloConfig),
    HessianApprox {
        sigma: f64,
        trace: TraceConfig,
        p_floor: f64,
        floor_policy: FloorPolicy,
    },
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig::MonteCarlo(MonteCarloConfig::default())
    }
}

impl EstimatorConfig {
    pub fn hessian(sigma: f64, trace: TraceConfig) -> Self {
        EstimatorConfig::HessianApprox {
            sigma,
            trace,
            p_floor: P_FLOOR,
            floor_policy: FloorPolicy::Exclude,
        }
    }
}

/// Seed of a sample's estimator, from the master seed and its id.
pub fn sample_seed(master: u64, sample_id: &str) -> u64 {
    rng::derive_seed(master, &[rng::hash_id(sample_id)])
}

/// Estimate one sample with a per-sample seed derived from `master`.
pub fn estimate<S: TokenScorer + ?Sized>(
    scorer: &S,
    sample_id: &str,
    x: &[TokenId],
    cfg: &EstimatorConfig,
    master: u64,
    mode: ExecMode,
) -> Result<MrdEstimate> {
    let seed = sample_seed(master, sample_id);
    let run = || match cfg {
        EstimatorConfig::MonteCarlo(mc) => mrd_monte_carlo(scorer, x, mc, seed, mode),
        EstimatorConfig::HessianApprox {
            sigma,
            trace,
            p_floor,
            floor_policy,
        } => {
            let tr = hutchinson_trace(scorer, x, trace, seed, mode)?;
            mrd_hessian_approx(scorer, x, *sigma, &tr, *p_floor, *floor_policy)
        }
    };
    run().map_err(|e| e.for_sample(sample_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMrd {
    pub sample_id: String,
    pub estimate: MrdEstimate,
}

/// Estimate every sample and sort by value descending, ties by id ascending.
pub fn rank_by_mrd<S: TokenScorer + ?Sized>(
    scorer: &S,
    samples: &[TokenSequence],
    cfg: &EstimatorConfig,
    master: u64,
    mode: ExecMode,
) -> Result<Vec<RankedMrd>> {
    if samples.is_empty() {
        return Err(Error::invalid("nothing to rank"));
    }
    let mut out = exec::try_map_indexed(mode, samples.len(), |i| {
        let s = &samples[i];
        estimate(scorer, &s.sample_id, &s.tokens, cfg, master, ExecMode::Sequential).map(|estimate| RankedMrd {
            sample_id: s.sample_id.clone(),
            estimate,
        })
    })?;
    out.sort_by(|a, b| {
        b.estimate
            .value
            .total_cmp(&a.estimate.value)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(out)
}

/// One line of an MRD report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdRecord {
    pub sample_id: String,
    pub estimator: Estimator,
    pub value: f64,
    pub std_error: f64,
    pub sigma: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub excluded_positions: usize,
}

impl From<&RankedMrd> for MrdRecord {
    fn from(r: &RankedMrd) -> Self {
        MrdRecord {
            sample_id: r.sample_id.clone(),
            estimator: r.estimate.estimator,
            value: r.estimate.value,
            std_error: r.estimate.std_error,
            sigma: r.estimate.sigma,
            k: r.estimate.k,
            excluded_positions: r.estimate.excluded_positions.len(),
        }
    }
}

pub fn write_mrd_report(records: &[MrdRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_mrd_report(path: impl AsRef<Path>) -> Result<Vec<MrdRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Load(format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_perturbation;

    fn bowl(theta: Vec<f64>) -> QuadraticScorer {
        // P(θ) = −(1 + θᵀθ)
        let d = theta.len();
        QuadraticScorer::diagonal(&vec![-2.0; d], -1.0, theta, 1).unwrap()
    }

    #[test]
    fn naive_zero_delta_is_zero() {
        let s = bowl(vec![0.3, -0.2, 0.1]);
        assert_eq!(mrd_naive(&s, &[], &Perturbation::zero(3)).unwrap(), 0.0);
    }

    #[test]
    fn naive_matches_two_pass_difference() {
        let s = bowl(vec![0.3, -0.2, 0.1]);
        let d = gaussian_perturbation(3, 0.01, 4).unwrap();
        let moved: Vec<f64> = s.theta.iter().zip(&d.delta).map(|(a, b)| a + b).collect();
        let expected = (s.value(&s.theta) - s.value(&moved)).abs();
        assert!((mrd_naive(&s, &[], &d).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn single_draw_is_naive_over_p() {
        let s = bowl(vec![0.3, -0.2, 0.1]);
        let cfg = MonteCarloConfig { sigma: 0.01, k: 1, ..Default::default() };
        let est = mrd_monte_carlo(&s, &[], &cfg, 9, ExecMode::Sequential).unwrap();
        let d = gaussian_perturbation(3, 0.01, perturbation_seed(9, 0)).unwrap();
        let naive = mrd_naive(&s, &[], &d).unwrap();
        assert!((est.value - naive / s.value(&s.theta).abs()).abs() < 1e-15);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn monte_carlo_is_mode_independent() {
        let s = bowl(vec![0.3, -0.2, 0.1, 0.0]);
        let cfg = MonteCarloConfig { sigma: 0.01, k: 64, ..Default::default() };
        let a = mrd_monte_carlo(&s, &[], &cfg, 3, ExecMode::Sequential).unwrap();
        let b = mrd_monte_carlo(&s, &[], &cfg, 3, ExecMode::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn floor_policy() {
        let s = QuadraticScorer::diagonal(&[0.0], 0.0, vec![0.0], 2).unwrap();
        let cfg = MonteCarloConfig { sigma: 0.01, k: 4, floor_policy: FloorPolicy::Error, ..Default::default() };
        assert!(matches!(
            mrd_monte_carlo(&s, &[], &cfg, 1, ExecMode::Sequential),
            Err(Error::DegenerateToken { position: 0, .. })
        ));
        let cfg = MonteCarloConfig { floor_policy: FloorPolicy::Exclude, ..cfg };
        assert!(mrd_monte_carlo(&s, &[], &cfg, 1, ExecMode::Sequential).is_err());
    }

    #[test]
    fn identity_hessian_probe_is_exact() {
        let s = QuadraticScorer::diagonal(&[1.0; 10], -1.0, vec![0.0; 10], 1).unwrap();
        let tr = hutchinson_trace(&s, &[], &TraceConfig { probes: 7, fd_step: 1e-4 }, 2, ExecMode::Sequential).unwrap();
        assert!((tr.per_token[0] - 10.0).abs() < 1e-9);
        assert!(tr.std_error[0] < 1e-9);
    }

    #[test]
    fn hessian_approx_identities() {
        let s = bowl(vec![0.1, 0.2]);
        let flat = TraceEstimate { per_token: vec![0.0], std_error: vec![0.0], probes: 1, fd_step: 1e-4, seed: 0 };
        assert_eq!(mrd_hessian_approx(&s, &[], 1e-3, &flat, P_FLOOR, FloorPolicy::Exclude).unwrap().value, 0.0);
        let tr = TraceEstimate { per_token: vec![-4.0], ..flat };
        let a = mrd_hessian_approx(&s, &[], 1e-3, &tr, P_FLOOR, FloorPolicy::Exclude).unwrap().value;
        let b = mrd_hessian_approx(&s, &[], 2e-3, &tr, P_FLOOR, FloorPolicy::Exclude).unwrap().value;
        assert_eq!(b, 4.0 * a);
        assert!(a > 0.0);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mrd.jsonl");
        let rec = MrdRecord {
            sample_id: "s0001".into(),
            estimator: Estimator::MonteCarlo,
            value: 0.25,
            std_error: 0.01,
            sigma: 1e-5,
            k: 200,
            excluded_positions: 2,
        };
        write_mrd_report(&[rec.clone(), rec.clone()], &p).unwrap();
        assert_eq!(read_mrd_report(&p).unwrap(), vec![rec.clone(), rec]);
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.contains("\"K\":200") && line.contains("\"estimator\":\"monte_carlo\""));
    }
}
