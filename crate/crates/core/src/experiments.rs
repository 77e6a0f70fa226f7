//! End-to-end experiment pipelines shared by the command-line runner and the
//! acceptance suite.
//!
//! Every command takes an [`ExperimentConfig`], builds or loads the corpus and
//! model it needs, and returns a typed outcome. When an [`Output`] directory
//! is given, the command also writes its tables (CSV), nested records (JSON)
//! and a snapshot of the configuration that produced them.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    default_rejection_fixtures, generate_corpus, load_corpus, load_rejection_fixtures, rejection_pairs, save_corpus,
    save_rejection_fixtures, Corpus, CorpusSpec, Tier, TokenSequence,
};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::lm::train::{continue_training, TrainReport};
use crate::lm::{load_checkpoint, save_checkpoint, token_log_probs, LanguageModel, LmConfig, OptimizerConfig};
use crate::metrics::{full_report, memorization_accuracy, MetricsConfig, MetricsReport};
use crate::mrd::{
    self, EstimatorConfig, FloorPolicy, MonteCarloConfig, MrdRecord, RankedMrd, TraceConfig, DEFAULT_FD_STEP,
    DEFAULT_K, DEFAULT_PROBES, DEFAULT_SIGMA, P_FLOOR,
};
use crate::rng;
use crate::stats;
use crate::unlearn::{
    self, efficiency_report, run_method, run_sga, EarlyStopThresholds, Method, UnlearnConfig, UnlearnRunLog,
    Weighting,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrdSettings {
    /// σ of the Monte-Carlo estimate reported per sample.
    pub sigma: f64,
    pub k: usize,
    /// σ at which the Monte-Carlo and Hessian-trace estimates are compared.
    pub comparison_sigma: f64,
    pub probes: usize,
    pub fd_step: f64,
    pub p_floor: f64,
    pub floor_policy: FloorPolicy,
}

impl Default for MrdSettings {
    fn default() -> Self {
        MrdSettings {
            sigma: DEFAULT_SIGMA,
            k: DEFAULT_K,
            comparison_sigma: 1e-3,
            probes: DEFAULT_PROBES,
            fd_step: DEFAULT_FD_STEP,
            p_floor: P_FLOOR,
            floor_policy: FloorPolicy::Exclude,
        }
    }
}

impl MrdSettings {
    pub fn monte_carlo(&self, sigma: f64, k: usize) -> EstimatorConfig {
        EstimatorConfig::MonteCarlo(MonteCarloConfig {
            sigma,
            k,
            p_floor: self.p_floor,
            floor_policy: self.floor_policy,
        })
    }

    pub fn hessian(&self, sigma: f64) -> EstimatorConfig {
        EstimatorConfig::HessianApprox {
            sigma,
            trace: TraceConfig {
                probes: self.probes,
                fd_step: self.fd_step,
            },
            p_floor: self.p_floor,
            floor_policy: self.floor_policy,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.comparison_sigma > 0.0) {
            return Err(Error::invalid("MRD sigmas must be positive"));
        }
        if self.k == 0 || self.probes == 0 {
            return Err(Error::invalid("MRD K and probe count must be at least 1"));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::invalid("fd_step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSettings {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Weighting schemes tried for CGA; other methods sample uniformly.
    pub weightings: Vec<Weighting>,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings {
            seeds: (0..5).collect(),
            methods: Method::ALL.to_vec(),
            weightings: vec![Weighting::MrdProportional, Weighting::InverseMrdProportional],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivitySettings {
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub sigma_multipliers: Vec<f64>,
    /// Forget samples included in both sweeps.
    pub samples: usize,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        SensitivitySettings {
            ks: vec![10, 25, 50, 100, 200],
            repeats: 20,
            sigma_multipliers: vec![1.0, 2.0, 3.0, 4.0],
            samples: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffvarSettings {
    /// Samples unlearned one at a time.
    pub samples: usize,
}

impl Default for DiffvarSettings {
    fn default() -> Self {
        DiffvarSettings { samples: 20 }
    }
}

/// Everything a command needs. Missing fields take their defaults, and
/// command-line flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Load the corpus from this file instead of generating it.
    pub corpus_path: Option<PathBuf>,
    /// Load the model from this checkpoint instead of training it.
    pub checkpoint_path: Option<PathBuf>,
    /// Rejection targets for PO; generated from the corpus when absent.
    pub rejection_path: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub model: LmConfig,
    pub training: OptimizerConfig,
    pub metrics: MetricsConfig,
    pub mrd: MrdSettings,
    pub unlearn: UnlearnConfig,
    pub compare: CompareSettings,
    pub sensitivity: SensitivitySettings,
    pub diffvar: DiffvarSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus_path: None,
            checkpoint_path: None,
            rejection_path: None,
            corpus: CorpusSpec::default(),
            model: LmConfig {
                vocab_size: crate::corpus::Vocab::standard().size(),
                embed_dim: 32,
                ..LmConfig::default()
            },
            training: OptimizerConfig {
                learning_rate: 3e-3,
                epochs: 60,
                ..OptimizerConfig::default()
            },
            metrics: MetricsConfig::default(),
            mrd: MrdSettings::default(),
            unlearn: UnlearnConfig {
                learning_rate: 3e-3,
                max_steps: 1000,
                ..UnlearnConfig::default()
            },
            compare: CompareSettings::default(),
            sensitivity: SensitivitySettings::default(),
            diffvar: DiffvarSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.as_ref().display())))?;
        let file: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("config {}: {e}", path.as_ref().display())))?;
        Self::from_overrides(file).map_err(|e| Error::invalid(format!("config {}: {e}", path.as_ref().display())))
    }

    /// The defaults with every field present in `overrides` replaced, at any
    /// nesting depth.
    pub fn from_overrides(overrides: serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(ExperimentConfig::default())?;
        merge_json(&mut base, overrides);
        Ok(serde_json::from_value(base)?)
    }

    /// Use `seed` for the corpus, model initialization, training order and
    /// unlearning.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.training.seed = seed;
        self.unlearn.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate(&crate::corpus::Vocab::standard())?;
        self.model.validate()?;
        self.training.validate()?;
        self.mrd.validate()?;
        self.unlearn.validate()?;
        if self.metrics.n_gram == 0 || !(self.metrics.k_fraction > 0.0 && self.metrics.k_fraction <= 1.0) {
            return Err(Error::invalid("metrics need n_gram ≥ 1 and 0 < k_fraction ≤ 1"));
        }
        if self.sensitivity.repeats < 2 || self.sensitivity.ks.contains(&0) {
            return Err(Error::invalid("sensitivity needs ≥ 2 repeats and positive K values"));
        }
        if self.sensitivity.sigma_multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid("sigma multipliers must be positive"));
        }
        if self.compare.seeds.is_empty() || self.compare.methods.is_empty() {
            return Err(Error::invalid("compare needs at least one seed and one method"));
        }
        for path in [&self.corpus_path, &self.checkpoint_path, &self.rejection_path].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::invalid(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

fn merge_json(base: &mut serde_json::Value, overrides: serde_json::Value) {
    match (base, overrides) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// A named pass/fail condition in a command summary. Reported-only checks
/// never affect the exit status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub asserted: bool,
    pub detail: String,
}

impl Check {
    fn asserted(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            asserted: true,
            detail,
        }
    }

    fn reported(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            asserted: false,
            detail,
        }
    }
}

pub fn all_asserted_pass(checks: &[Check]) -> bool {
    checks.iter().filter(|c| c.asserted).all(|c| c.passed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub float: String,
    pub parallel: bool,
    pub workers: usize,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            version: env!("CARGO_PKG_VERSION").into(),
            float: "f64, IEEE 754 round-to-nearest".into(),
            parallel: ExecMode::best() == ExecMode::Parallel,
            workers: exec::worker_count(),
        }
    }
}

/// Output directory of one command run.
pub struct Output {
    dir: PathBuf,
}

impl Output {
    /// Create `dir` and write `config.json` and `environment.json` into it.
    pub fn create(dir: impl Into<PathBuf>, cfg: &ExperimentConfig) -> Result<Self> {
        let out = Output { dir: dir.into() };
        std::fs::create_dir_all(&out.dir)?;
        out.json("config.json", cfg)?;
        out.json("environment.json", &Environment::current())?;
        Ok(out)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(self.path(name), text + "\n")?;
        Ok(())
    }

    pub fn csv<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name)).map_err(csv_error)?;
        for r in rows {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Corpus and model a command operates on.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub corpus: Corpus,
    pub model: LanguageModel,
    pub train_report: Option<TrainReport>,
}

impl Workspace {
    pub fn training_samples(&self) -> Vec<TokenSequence> {
        self.corpus.training_samples().cloned().collect()
    }

    /// Frozen early-stop bars over every training sample.
    pub fn thresholds(&self, cfg: &ExperimentConfig) -> Result<EarlyStopThresholds> {
        EarlyStopThresholds::from_model(&self.model, &self.training_samples(), cfg.metrics.n_gram, ExecMode::best())
    }
}

pub fn load_or_generate_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.corpus_path {
        Some(p) => load_corpus(p),
        None => generate_corpus(&cfg.corpus, cfg.seed),
    }
}

/// Load the configured checkpoint, or train a fresh model on `corpus`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Workspace> {
    cfg.validate()?;
    let corpus = load_or_generate_corpus(cfg)?;
    let (model, train_report) = match &cfg.checkpoint_path {
        Some(p) => (load_checkpoint(p)?, None),
        None => {
            let model_cfg = LmConfig {
                vocab_size: corpus.vocab.size(),
                ..cfg.model.clone()
            };
            let mut model = LanguageModel::init(model_cfg)?;
            let report = continue_training(&mut model, &corpus.training_stream(), &cfg.training)?;
            (model, Some(report))
        }
    };
    if model.config().vocab_size != corpus.vocab.size() {
        return Err(Error::invalid(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            model.config().vocab_size,
            corpus.vocab.size()
        )));
    }
    if model.config().context_length < corpus.max_len() {
        return Err(Error::invalid(format!(
            "context length {} is shorter than the longest sample ({})",
            model.config().context_length,
            corpus.max_len()
        )));
    }
    Ok(Workspace {
        corpus,
        model,
        train_report,
    })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub mean_ma: f64,
    pub params: usize,
    pub samples: usize,
    pub stream_length: usize,
    pub checks: Vec<Check>,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: Option<&Output>) -> Result<(Workspace, TrainSummary)> {
    let cfg = ExperimentConfig {
        checkpoint_path: None,
        ..cfg.clone()
    };
    let ws = prepare(&cfg)?;
    let report = ws.train_report.clone().unwrap_or_default();
    let samples = ws.training_samples();
    let ma = exec::try_map_indexed(ExecMode::best(), samples.len(), |i| {
        memorization_accuracy(&ws.model, &samples[i].tokens)
    })?;
    let mean_ma = stats::mean(&ma);
    let summary = TrainSummary {
        epochs: report.epoch_loss.len(),
        final_loss: report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        mean_ma,
        params: ws.model.dim(),
        samples: samples.len(),
        stream_length: ws.corpus.training_stream().len(),
        checks: vec![Check::asserted("memorization", mean_ma >= 0.9, format!("mean MA {mean_ma:.4} (target ≥ 0.9)"))],
    };
    if let Some(out) = out {
        save_checkpoint(&ws.model, out.path("model.ckpt"))?;
        save_corpus(&ws.corpus, out.path("corpus.jsonl"))?;
        save_rejection_fixtures(
            &default_rejection_fixtures(&ws.corpus, cfg.metrics.prompt_len),
            out.path("rejections.json"),
        )?;
        let rows: Vec<EpochRow> =
            report.epoch_loss.iter().enumerate().map(|(i, &loss)| EpochRow { epoch: i + 1, loss }).collect();
        out.csv("training_curve.csv", &rows)?;
        out.json("summary.json", &summary)?;
    }
    Ok((ws, summary))
}

// ---------------------------------------------------------------- mrd

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdRow {
    pub sample_id: String,
    pub length: usize,
    pub frequency_tier: Tier,
    pub complexity_tier: Tier,
    pub rare_token: bool,
    /// Monte-Carlo estimate at the base σ.
    pub monte_carlo: f64,
    pub monte_carlo_se: f64,
    /// Monte-Carlo estimate at the comparison σ.
    pub monte_carlo_cmp: f64,
    /// Hessian-trace approximation at the comparison σ.
    pub hessian_approx: f64,
    pub hessian_approx_se: f64,
    pub excluded_positions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrdSummary {
    pub samples: usize,
    pub sigma: f64,
    pub comparison_sigma: f64,
    pub k: usize,
    pub probes: usize,
    pub spearman_mc_vs_approx: f64,
    pub checks: Vec<Check>,
}

/// Both estimators on each sample.
pub fn mrd_table(
    model: &LanguageModel,
    samples: &[TokenSequence],
    settings: &MrdSettings,
    master: u64,
) -> Result<(Vec<MrdRow>, Vec<MrdRecord>)> {
    let per = exec::try_map_indexed(ExecMode::best(), samples.len(), |i| {
        let s = &samples[i];
        let est = |cfg: &EstimatorConfig| mrd::estimate(model, &s.sample_id, &s.tokens, cfg, master, ExecMode::Sequential);
        let mc = est(&settings.monte_carlo(settings.sigma, settings.k))?;
        let mc_cmp = est(&settings.monte_carlo(settings.comparison_sigma, settings.k))?;
        let approx = est(&settings.hessian(settings.comparison_sigma))?;
        Ok::<_, Error>((s, mc, mc_cmp, approx))
    })?;
    let mut rows = Vec::with_capacity(per.len());
    let mut records = Vec::with_capacity(3 * per.len());
    for (s, mc, mc_cmp, approx) in per {
        rows.push(MrdRow {
            sample_id: s.sample_id.clone(),
            length: s.len(),
            frequency_tier: s.labels.frequency_tier,
            complexity_tier: s.labels.complexity_tier,
            rare_token: s.labels.rare_token,
            monte_carlo: mc.value,
            monte_carlo_se: mc.std_error,
            monte_carlo_cmp: mc_cmp.value,
            hessian_approx: approx.value,
            hessian_approx_se: approx.std_error,
            excluded_positions: mc.excluded_positions.len(),
        });
        for e in [mc, mc_cmp, approx] {
            records.push(MrdRecord::from(&RankedMrd {
                sample_id: s.sample_id.clone(),
                estimate: e,
            }));
        }
    }
    Ok((rows, records))
}

pub fn cmd_mrd(cfg: &ExperimentConfig, out: Option<&Output>) -> Result<(Vec<MrdRow>, MrdSummary)> {
    let ws = prepare(cfg)?;
    let (mut rows, records) = mrd_table(&ws.model, &ws.corpus.forget, &cfg.mrd, cfg.seed)?;
    rows.sort_by(|a, b| b.monte_carlo.total_cmp(&a.monte_carlo).then_with(|| a.sample_id.cmp(&b.sample_id)));
    let mc: Vec<f64> = rows.iter().map(|r| r.monte_carlo_cmp).collect();
    let ap: Vec<f64> = rows.iter().map(|r| r.hessian_approx).collect();
    let rho = if rows.len() >= 2 { stats::spearman(&mc, &ap).unwrap_or(f64::NAN) } else { f64::NAN };
    let summary = MrdSummary {
        samples: rows.len(),
        sigma: cfg.mrd.sigma,
        comparison_sigma: cfg.mrd.comparison_sigma,
        k: cfg.mrd.k,
        probes: cfg.mrd.probes,
        spearman_mc_vs_approx: rho,
        checks: vec![Check::reported(
            "estimator_agreement",
            rho >= 0.8 && rows.len() >= 20,
            format!("Spearman {rho:.4} over {} samples (target ≥ 0.8 over ≥ 20)", rows.len()),
        )],
    };
    if let Some(out) = out {
        mrd::write_mrd_report(&records, out.path("mrd.jsonl"))?;
        out.csv("mrd.csv", &rows)?;
        out.json("summary.json", &summary)?;
    }
    Ok((rows, summary))
}

// ---------------------------------------------------------------- unlearn

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnSummary {
    pub method: Method,
    pub weighting: Option<Weighting>,
    #[serde(rename = "M")]
    pub total_updates: usize,
    #[serde(rename = "C")]
    pub per_update_cost: f64,
    #[serde(rename = "E")]
    pub efficiency: Option<f64>,
    pub stop_reason: unlearn::StopReason,
    pub forgotten: usize,
    pub forget_size: usize,
    pub before: MetricsReport,
    pub after: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleUpdateRow {
    pub sample_id: String,
    pub mrd: f64,
    pub updates: usize,
    pub forgotten_at: Option<usize>,
    pub final_ma: f64,
    pub final_el: f64,
    pub final_forgotten: bool,
}

/// Rejection pairs for the forget split, from the configured file or the
/// built-in refusals.
pub fn rejection_pairs_for(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<crate::corpus::RejectionPair>> {
    let fixtures = match &cfg.rejection_path {
        Some(p) => load_rejection_fixtures(p)?,
        None => default_rejection_fixtures(corpus, cfg.metrics.prompt_len),
    };
    rejection_pairs(corpus, &fixtures)
}

/// Run one unlearning method from the workspace model and return the updated
/// model with its log.
pub fn unlearn_once(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    ucfg: &UnlearnConfig,
    thresholds: &EarlyStopThresholds,
) -> Result<(LanguageModel, UnlearnRunLog)> {
    let mut model = ws.model.clone();
    let pairs = if ucfg.method == Method::Po {
        Some(rejection_pairs_for(cfg, &ws.corpus)?)
    } else {
        None
    };
    let log = run_method(
        &mut model,
        Some(&ws.model),
        &ws.corpus.forget,
        &ws.corpus.retain,
        pairs.as_deref(),
        ucfg,
        thresholds,
    )?;
    Ok((model, log))
}

fn report(model: &LanguageModel, corpus: &Corpus, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    full_report(model, &corpus.forget, &corpus.retain, &corpus.heldout, &cfg.metrics, ExecMode::best())
}

pub fn cmd_unlearn(cfg: &ExperimentConfig, out: Option<&Output>) -> Result<(UnlearnRunLog, UnlearnSummary)> {
    let ws = prepare(cfg)?;
    let thresholds = ws.thresholds(cfg)?;
    let before = report(&ws.model, &ws.corpus, cfg)?;
    let mrd_values = exec::try_map_indexed(ExecMode::best(), ws.corpus.forget.len(), |i| {
        let s = &ws.corpus.forget[i];
        mrd::estimate(&ws.model, &s.sample_id, &s.tokens, &cfg.unlearn.estimator, cfg.seed, ExecMode::Sequential)
            .map(|e| e.value)
    })?;
    let (model, log) = unlearn_once(&ws, cfg, &cfg.unlearn, &thresholds)?;
    let after = report(&model, &ws.corpus, cfg)?;
    let summary = UnlearnSummary {
        method: log.method,
        weighting: log.weighting,
        total_updates: log.total_updates,
        per_update_cost: log.per_update_cost,
        efficiency: efficiency_report(&log).ok().map(|e| e.e),
        stop_reason: log.stop_reason,
        forgotten: log.forgotten_count(),
        forget_size: ws.corpus.forget.len(),
        before,
        after,
    };
    if let Some(out) = out {
        save_checkpoint(&model, out.path("unlearned.ckpt"))?;
        unlearn::write_run_log(&log, out.path("run_log.jsonl"))?;
        let rows: Vec<SampleUpdateRow> = log
            .samples
            .iter()
            .zip(&mrd_values)
            .map(|(s, &mrd)| SampleUpdateRow {
                sample_id: s.sample_id.clone(),
                mrd,
                updates: s.updates,
                forgotten_at: s.forgotten_at,
                final_ma: s.final_ma,
                final_el: s.final_el,
                final_forgotten: s.final_forgotten,
            })
            .collect();
        out.csv("samples.csv", &rows)?;
        out.csv("metrics_before.csv", &metric_rows(&summary.before))?;
        out.csv("metrics_after.csv", &metric_rows(&summary.after))?;
        out.json("summary.json", &summary)?;
    }
    Ok((log, summary))
}

// ---------------------------------------------------------------- evaluate

#[derive(Serialize)]
struct MetricRow {
    split: String,
    metric: String,
    value: f64,
}

fn metric_rows(r: &MetricsReport) -> Vec<MetricRow> {
    r.rows()
        .into_iter()
        .map(|(split, metric, value)| MetricRow { split, metric, value })
        .collect()
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, out: Option<&Output>) -> Result<MetricsReport> {
    let ws = prepare(cfg)?;
    let r = report(&ws.model, &ws.corpus, cfg)?;
    if let Some(out) = out {
        out.json("metrics.json", &r)?;
        out.csv("metrics.csv", &metric_rows(&r))?;
    }
    Ok(r)
}

// ---------------------------------------------------------------- characteristics

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharacteristicRow {
    pub sample_id: String,
    pub length: usize,
    pub frequency_tier: Tier,
    pub complexity_tier: Tier,
    pub rare_token: bool,
    pub initial_probability_tier: Tier,
    pub mean_token_probability: f64,
    pub mrd: f64,
    pub mrd_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSummary {
    pub axis: String,
    pub tier: String,
    pub count: usize,
    pub mean_mrd: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharacteristicsSummary {
    pub tiers: Vec<TierSummary>,
    pub checks: Vec<Check>,
}

/// Attach the post-training initial-probability tier: `High` when the
/// sample's mean per-token probability is at least the corpus average.
pub fn initial_probability_tiers(model: &LanguageModel, samples: &mut [TokenSequence]) -> Result<Vec<f64>> {
    let probs = exec::try_map_indexed(ExecMode::best(), samples.len(), |i| {
        let lp = token_log_probs(model, &samples[i].tokens)?;
        Ok::<_, Error>(stats::mean(&lp.per_token.iter().map(|v| v.exp()).collect::<Vec<_>>()))
    })?;
    let avg = stats::mean(&probs);
    for (s, &p) in samples.iter_mut().zip(&probs) {
        s.labels.initial_probability_tier = Some(if p >= avg { Tier::High } else { Tier::Low });
    }
    Ok(probs)
}

/// `first` and `second` are the two tier groups; `expect_first_lower` says
/// which direction the paper reports. Returns the one-sided p-value of that
/// direction, or `None` when a group is too small to test.
fn direction(first: &[f64], second: &[f64], expect_first_lower: bool) -> Option<f64> {
    let r = if expect_first_lower {
        stats::welch_less(first, second)
    } else {
        stats::welch_less(second, first)
    };
    r.ok().map(|(_, p)| p)
}

pub fn characteristics_table(
    model: &LanguageModel,
    samples: &[TokenSequence],
    settings: &MrdSettings,
    master: u64,
) -> Result<(Vec<CharacteristicRow>, CharacteristicsSummary)> {
    let mut samples = samples.to_vec();
    let probs = initial_probability_tiers(model, &mut samples)?;
    let est = settings.monte_carlo(settings.sigma, settings.k);
    let values = exec::try_map_indexed(ExecMode::best(), samples.len(), |i| {
        let s = &samples[i];
        mrd::estimate(model, &s.sample_id, &s.tokens, &est, master, ExecMode::Sequential)
    })?;
    let rows: Vec<CharacteristicRow> = samples
        .iter()
        .zip(&values)
        .zip(&probs)
        .map(|((s, e), &p)| CharacteristicRow {
            sample_id: s.sample_id.clone(),
            length: s.len(),
            frequency_tier: s.labels.frequency_tier,
            complexity_tier: s.labels.complexity_tier,
            rare_token: s.labels.rare_token,
            initial_probability_tier: s.labels.initial_probability_tier.unwrap_or(Tier::Low),
            mean_token_probability: p,
            mrd: e.value,
            mrd_se: e.std_error,
        })
        .collect();

    type Axis = (&'static str, fn(&CharacteristicRow) -> bool, &'static str, &'static str);
    let axes: [Axis; 4] = [
        ("frequency", |r| r.frequency_tier == Tier::High, "high", "low"),
        ("complexity", |r| r.complexity_tier == Tier::High, "high", "low"),
        ("rare_token", |r| r.rare_token, "yes", "no"),
        ("initial_probability", |r| r.initial_probability_tier == Tier::High, "high", "low"),
    ];
    let mut tiers = Vec::new();
    let mut groups = Vec::new();
    for (axis, is_first, first_name, second_name) in axes {
        let first: Vec<f64> = rows.iter().filter(|r| is_first(r)).map(|r| r.mrd).collect();
        let second: Vec<f64> = rows.iter().filter(|r| !is_first(r)).map(|r| r.mrd).collect();
        for (name, g) in [(first_name, &first), (second_name, &second)] {
            tiers.push(TierSummary {
                axis: axis.into(),
                tier: name.into(),
                count: g.len(),
                mean_mrd: if g.is_empty() { f64::NAN } else { stats::mean(g) },
                std_error: stats::std_error(g),
            });
        }
        groups.push((first, second));
    }
    let check = |name: &str, idx: usize, first_lower: bool, asserted: bool, what: &str| {
        let (a, b) = &groups[idx];
        let enough = a.len() >= 20 && b.len() >= 20;
        let p = direction(a, b, first_lower);
        let passed = enough && p.is_some_and(|p| p < 0.05);
        let detail = format!(
            "{what}: means {:.4e} vs {:.4e}, counts {} / {}, one-sided Welch p = {}",
            stats::mean(a),
            stats::mean(b),
            a.len(),
            b.len(),
            p.map_or("n/a".into(), |p| format!("{p:.4}"))
        ) + if enough { "" } else { " (fewer than 20 samples in a tier)" };
        if asserted {
            Check::asserted(name, passed, detail)
        } else {
            Check::reported(name, passed, detail)
        }
    };
    let checks = vec![
        check("frequency_direction", 0, true, true, "high-frequency MRD < low-frequency MRD"),
        check("complexity_direction", 1, false, true, "high-complexity MRD > low-complexity MRD"),
        check("rare_token_direction", 2, false, false, "rare-token MRD > plain MRD"),
        check("initial_probability_direction", 3, true, false, "high-probability MRD < low-probability MRD"),
    ];
    Ok((rows, CharacteristicsSummary { tiers, checks }))
}

pub fn cmd_characteristics(
    cfg: &ExperimentConfig,
    out: Option<&Output>,
) -> Result<(Vec<CharacteristicRow>, CharacteristicsSummary)> {
    let ws = prepare(cfg)?;
    let (rows, summary) = characteristics_table(&ws.model, &ws.training_samples(), &cfg.mrd, cfg.seed)?;
    if let Some(out) = out {
        out.csv("characteristics.csv", &summary.tiers)?;
        out.csv("characteristics_samples.csv", &rows)?;
        out.json("summary.json", &summary)?;
    }
    Ok((rows, summary))
}

// ---------------------------------------------------------------- sensitivity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    /// Mean over samples of the estimate's mean over repeats.
    pub mean_value: f64,
    /// Mean over samples of the standard deviation across repeats.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaPairRow {
    pub multiplier_a: f64,
    pub multiplier_b: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivitySummary {
    pub k_sweep: Vec<KSweepRow>,
    pub sigma_sweep: Vec<SigmaPairRow>,
    pub checks: Vec<Check>,
}

pub fn k_sweep(
    model: &LanguageModel,
    samples: &[TokenSequence],
    settings: &MrdSettings,
    ks: &[usize],
    repeats: usize,
    master: u64,
) -> Result<Vec<KSweepRow>> {
    ks.iter()
        .map(|&k| {
            let est = settings.monte_carlo(settings.sigma, k);
            let per_sample = exec::try_map_indexed(ExecMode::best(), samples.len(), |i| {
                let s = &samples[i];
                let vals = (0..repeats)
                    .map(|r| {
                        let seed = rng::derive_seed(master, &[0x4b, r as u64]);
                        mrd::estimate(model, &s.sample_id, &s.tokens, &est, seed, ExecMode::Sequential)
                            .map(|e| e.value)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok::<_, Error>((stats::mean(&vals), stats::std_dev(&vals)))
            })?;
            Ok(KSweepRow {
                k,
                mean_value: stats::mean(&per_sample.iter().map(|p| p.0).collect::<Vec<_>>()),
                std: stats::mean(&per_sample.iter().map(|p| p.1).collect::<Vec<_>>()),
            })
        })
        .collect()
}

pub fn sigma_sweep(
    model: &LanguageModel,
    samples: &[TokenSequence],
    settings: &MrdSettings,
    multipliers: &[f64],
    master: u64,
) -> Result<Vec<SigmaPairRow>> {
    let values = multipliers
        .iter()
        .map(|&m| {
            let est = settings.monte_carlo(settings.sigma * m, settings.k);
            exec::try_map_indexed(ExecMode::best(), samples.len(), |i| {
                let s = &samples[i];
                mrd::estimate(model, &s.sample_id, &s.tokens, &est, master, ExecMode::Sequential).map(|e| e.value)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for a in 0..multipliers.len() {
        for b in a + 1..multipliers.len() {
            rows.push(SigmaPairRow {
                multiplier_a: multipliers[a],
                multiplier_b: multipliers[b],
                spearman: stats::spearman(&values[a], &values[b])?,
            });
        }
    }
    Ok(rows)
}

pub fn sensitivity_checks(k_rows: &[KSweepRow], sigma_rows: &[SigmaPairRow]) -> Vec<Check> {
    let mut checks = Vec::new();
    let at = |k| k_rows.iter().find(|r| r.k == k).map(|r| r.std);
    if let (Some(s10), Some(s100)) = (at(10), at(100)) {
        checks.push(Check::asserted(
            "k_stability",
            s100 < s10,
            format!("std at K=100 {s100:.4e} vs K=10 {s10:.4e}"),
        ));
        let ratio = s10 / s100;
        let predicted = 10f64.sqrt();
        checks.push(Check::asserted(
            "k_sqrt_scaling",
            ratio >= predicted / 2.0 && ratio <= predicted * 2.0,
            format!("std ratio K=10/K=100 = {ratio:.3} (√10 = {predicted:.3}, factor-2 band)"),
        ));
    }
    if !sigma_rows.is_empty() {
        let min = sigma_rows.iter().map(|r| r.spearman).fold(f64::INFINITY, f64::min);
        checks.push(Check::asserted(
            "sigma_ranking_stability",
            min >= 0.9,
            format!("minimum pairwise Spearman {min:.4} (target ≥ 0.9)"),
        ));
    }
    checks
}

pub fn cmd_sensitivity(cfg: &ExperimentConfig, out: Option<&Output>) -> Result<SensitivitySummary> {
    let ws = prepare(cfg)?;
    let n = cfg.sensitivity.samples.min(ws.corpus.forget.len());
    let samples = &ws.corpus.forget[..n];
    let k_rows = k_sweep(&ws.model, samples, &cfg.mrd, &cfg.sensitivity.ks, cfg.sensitivity.repeats, cfg.seed)?;
    let sigma_rows = sigma_sweep(&ws.model, samples, &cfg.mrd, &cfg.sensitivity.sigma_multipliers, cfg.seed)?;
    let summary = SensitivitySummary {
        checks: sensitivity_checks(&k_rows, &sigma_rows),
        k_sweep: k_rows,
        sigma_sweep: sigma_rows,
    };
    if let Some(out) = out {
        out.csv("sensitivity_k.csv", &summary.k_sweep)?;
        out.csv("sensitivity_sigma.csv", &summary.sigma_sweep)?;
        out.json("summary.json", &summary)?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub seed: u64,
    pub method: Method,
    pub weighting: Option<Weighting>,
    #[serde(rename = "M")]
    pub total_updates: Option<usize>,
    #[serde(rename = "C")]
    pub per_update_cost: Option<f64>,
    #[serde(rename = "E")]
    pub efficiency: Option<f64>,
    pub stop_reason: Option<unlearn::StopReason>,
    pub forgotten: Option<usize>,
    /// Samples flagged within the SGA median budget.
    pub forgotten_within_budget: Option<usize>,
    pub ua: Option<f64>,
    pub mia: Option<f64>,
    pub rr: Option<f64>,
    pub uc_mean: Option<f64>,
    pub retain_ma: Option<f64>,
    pub retain_el: Option<f64>,
    pub heldout_ma: Option<f64>,
    pub heldout_el: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub rows: Vec<CompareRow>,
    pub sga_median_m: Option<f64>,
    pub cga_median_m: Option<f64>,
    pub budget: Option<usize>,
    pub checks: Vec<Check>,
}

struct CompareRun {
    row: CompareRow,
    log: Option<UnlearnRunLog>,
}

fn compare_run(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    thresholds: &EarlyStopThresholds,
    seed: u64,
    method: Method,
    weighting: Option<Weighting>,
) -> Result<CompareRun> {
    let ucfg = UnlearnConfig {
        method,
        seed,
        weighting: weighting.unwrap_or(cfg.unlearn.weighting),
        ..cfg.unlearn.clone()
    };
    let mut row = CompareRow {
        seed,
        method,
        weighting,
        total_updates: None,
        per_update_cost: None,
        efficiency: None,
        stop_reason: None,
        forgotten: None,
        forgotten_within_budget: None,
        ua: None,
        mia: None,
        rr: None,
        uc_mean: None,
        retain_ma: None,
        retain_el: None,
        heldout_ma: None,
        heldout_el: None,
        error: None,
    };
    let (model, log) = match unlearn_once(ws, cfg, &ucfg, thresholds) {
        Ok(r) => r,
        Err(e @ (Error::NumericalFailure { .. } | Error::DegenerateToken { .. } | Error::Sample { .. })) => {
            row.error = Some(e.to_string());
            return Ok(CompareRun { row, log: None });
        }
        Err(e) => return Err(e),
    };
    let r = report(&model, &ws.corpus, cfg)?;
    row.total_updates = Some(log.total_updates);
    row.per_update_cost = Some(log.per_update_cost);
    row.efficiency = efficiency_report(&log).ok().map(|e| e.e);
    row.stop_reason = Some(log.stop_reason);
    row.forgotten = Some(log.forgotten_count());
    if let Some((ua, mia, rr, avg)) = r.completeness() {
        row.ua = Some(ua);
        row.mia = Some(mia);
        row.rr = Some(rr);
        row.uc_mean = Some(avg);
    }
    row.retain_ma = r.retain.as_ref().map(|s| s.ma);
    row.retain_el = r.retain.as_ref().map(|s| s.el);
    row.heldout_ma = r.heldout.as_ref().map(|s| s.ma);
    row.heldout_el = r.heldout.as_ref().map(|s| s.el);
    Ok(CompareRun { row, log: Some(log) })
}

/// SGA against CGA under the first configured weighting, paired by seed.
pub fn sga_vs_cga_checks(runs: &[(u64, UnlearnRunLog, UnlearnRunLog)]) -> (Option<f64>, Option<f64>, Option<usize>, Vec<Check>) {
    if runs.is_empty() {
        return (None, None, None, vec![]);
    }
    let sga_m: Vec<f64> = runs.iter().map(|r| r.1.total_updates as f64).collect();
    let cga_m: Vec<f64> = runs.iter().map(|r| r.2.total_updates as f64).collect();
    let (ms, mc) = (stats::median(&sga_m), stats::median(&cga_m));
    let budget = ms.floor() as usize;
    let sga_f: Vec<f64> = runs.iter().map(|r| r.1.forgotten_within(budget) as f64).collect();
    let cga_f: Vec<f64> = runs.iter().map(|r| r.2.forgotten_within(budget) as f64).collect();
    let (fs, fc) = (stats::median(&sga_f), stats::median(&cga_f));
    let checks = vec![
        Check::asserted(
            "cga_fewer_updates",
            mc < ms,
            format!("median M: CGA {mc} vs SGA {ms} over {} seeds", runs.len()),
        ),
        Check::asserted(
            "cga_forgets_within_budget",
            fc >= fs,
            format!("median forgotten within {budget} updates: CGA {fc} vs SGA {fs}"),
        ),
    ];
    (Some(ms), Some(mc), Some(budget), checks)
}

pub fn cmd_compare(cfg: &ExperimentConfig, out: Option<&Output>) -> Result<CompareSummary> {
    let ws = prepare(cfg)?;
    let thresholds = ws.thresholds(cfg)?;
    let mut jobs: Vec<(u64, Method, Option<Weighting>)> = Vec::new();
    for &seed in &cfg.compare.seeds {
        for &method in &cfg.compare.methods {
            if method == Method::Cga {
                for &w in &cfg.compare.weightings {
                    jobs.push((seed, method, Some(w)));
                }
            } else {
                jobs.push((seed, method, None));
            }
        }
    }
    let mut runs = exec::try_map_indexed(ExecMode::best(), jobs.len(), |i| {
        let (seed, method, w) = jobs[i];
        compare_run(&ws, cfg, &thresholds, seed, method, w)
    })?;
    let first_weighting = cfg.compare.weightings.first().copied();
    let paired: Vec<(u64, UnlearnRunLog, UnlearnRunLog)> = cfg
        .compare
        .seeds
        .iter()
        .filter_map(|&seed| {
            let find = |m: Method, w: Option<Weighting>| {
                runs.iter()
                    .find(|r| r.row.seed == seed && r.row.method == m && r.row.weighting == w)
                    .and_then(|r| r.log.clone())
            };
            Some((seed, find(Method::Sga, None)?, find(Method::Cga, first_weighting)?))
        })
        .collect();
    let (sga_median_m, cga_median_m, budget, checks) = sga_vs_cga_checks(&paired);
    if let Some(b) = budget {
        for r in &mut runs {
            r.row.forgotten_within_budget = r.log.as_ref().map(|l| l.forgotten_within(b));
        }
    }
    let summary = CompareSummary {
        rows: runs.into_iter().map(|r| r.row).collect(),
        sga_median_m,
        cga_median_m,
        budget,
        checks,
    };
    if let Some(out) = out {
        out.csv("compare.csv", &summary.rows)?;
        out.json("summary.json", &summary)?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------- diffvar

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffvarRow {
    pub sample_id: String,
    pub frequency_tier: Tier,
    pub complexity_tier: Tier,
    pub rare_token: bool,
    pub mrd: f64,
    /// Gradient-ascent updates until the sample fell below both bars.
    pub updates: usize,
    pub forgotten: bool,
    /// mean_j |θ_after,j − θ_before,j|
    pub mean_abs_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffvarSummary {
    pub samples: usize,
    pub coefficient_of_variation: f64,
    pub spearman_mrd_vs_updates: Option<f64>,
    pub checks: Vec<Check>,
}

/// Samples the initial model does not yet place below both bars, forget
/// split first and then the retain split.
pub fn unlearnable_candidates(
    ws: &Workspace,
    thresholds: &EarlyStopThresholds,
) -> Result<Vec<TokenSequence>> {
    let all: Vec<&TokenSequence> = ws.corpus.forget.iter().chain(&ws.corpus.retain).collect();
    let below = exec::try_map_indexed(ExecMode::best(), all.len(), |i| {
        unlearn::early_stop_check(&ws.model, &all[i].tokens, thresholds)
    })?;
    Ok(all.into_iter().zip(below).filter(|(_, b)| !b).map(|(s, _)| s.clone()).collect())
}

/// Unlearn each sample on its own with gradient ascent from the same model,
/// recording updates-to-stop, parameter change and MRD.
pub fn per_sample_unlearning(
    model: &LanguageModel,
    samples: &[TokenSequence],
    ucfg: &UnlearnConfig,
    estimator: &EstimatorConfig,
    thresholds: &EarlyStopThresholds,
    master: u64,
) -> Result<Vec<DiffvarRow>> {
    let ucfg = UnlearnConfig {
        method: Method::Sga,
        ..ucfg.clone()
    };
    exec::try_map_indexed(ExecMode::best(), samples.len(), |i| {
        let s = &samples[i];
        let e = mrd::estimate(model, &s.sample_id, &s.tokens, estimator, master, ExecMode::Sequential)?;
        let mut m = model.clone();
        let log = run_sga(&mut m, std::slice::from_ref(s), &ucfg, thresholds)?;
        let change = m
            .params()
            .values()
            .iter()
            .zip(model.params().values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / model.dim() as f64;
        Ok(DiffvarRow {
            sample_id: s.sample_id.clone(),
            frequency_tier: s.labels.frequency_tier,
            complexity_tier: s.labels.complexity_tier,
            rare_token: s.labels.rare_token,
            mrd: e.value,
            updates: log.total_updates,
            forgotten: log.stop_reason == unlearn::StopReason::ConstraintMet,
            mean_abs_change: change,
        })
    })
}

/// Spearman correlation of MRD with updates-to-stop over `n` candidates drawn
/// with `seed`. Forget samples are drawn first; retain samples fill up the
/// remainder when too few forget samples sit above the bars.
pub fn mrd_vs_updates(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    thresholds: &EarlyStopThresholds,
    n: usize,
    seed: u64,
) -> Result<(f64, Vec<DiffvarRow>)> {
    let forget_ids: std::collections::HashSet<&str> = ws.corpus.forget.iter().map(|s| s.sample_id.as_str()).collect();
    let (mut forget, mut retain): (Vec<TokenSequence>, Vec<TokenSequence>) = unlearnable_candidates(ws, thresholds)?
        .into_iter()
        .partition(|s| forget_ids.contains(s.sample_id.as_str()));
    if forget.len() + retain.len() < n {
        return Err(Error::invalid(format!(
            "only {} samples sit above the bars; {n} requested",
            forget.len() + retain.len()
        )));
    }
    let mut r = rng::stream(rng::derive_seed(seed, &[0x46]));
    forget.shuffle(&mut r);
    retain.shuffle(&mut r);
    forget.extend(retain);
    forget.truncate(n);
    let rows = per_sample_unlearning(&ws.model, &forget, &cfg.unlearn, &cfg.unlearn.estimator, thresholds, seed)?;
    let m: Vec<f64> = rows.iter().map(|r| r.mrd).collect();
    let u: Vec<f64> = rows.iter().map(|r| r.updates as f64).collect();
    Ok((stats::spearman(&m, &u)?, rows))
}

pub fn cmd_diffvar(cfg: &ExperimentConfig, out: Option<&Output>) -> Result<(Vec<DiffvarRow>, DiffvarSummary)> {
    let ws = prepare(cfg)?;
    let thresholds = ws.thresholds(cfg)?;
    let mut candidates = unlearnable_candidates(&ws, &thresholds)?;
    candidates.truncate(cfg.diffvar.samples);
    if candidates.len() < 2 {
        return Err(Error::invalid("fewer than two samples sit above the early-stop bars"));
    }
    let mut rows =
        per_sample_unlearning(&ws.model, &candidates, &cfg.unlearn, &cfg.unlearn.estimator, &thresholds, cfg.seed)?;
    rows.sort_by(|a, b| b.mean_abs_change.total_cmp(&a.mean_abs_change).then_with(|| a.sample_id.cmp(&b.sample_id)));
    let changes: Vec<f64> = rows.iter().map(|r| r.mean_abs_change).collect();
    let cv = stats::coefficient_of_variation(&changes);
    let m: Vec<f64> = rows.iter().map(|r| r.mrd).collect();
    let u: Vec<f64> = rows.iter().map(|r| r.updates as f64).collect();
    let rho = stats::spearman(&m, &u).ok();
    let summary = DiffvarSummary {
        samples: rows.len(),
        coefficient_of_variation: cv,
        spearman_mrd_vs_updates: rho,
        checks: vec![
            Check::asserted("non_uniform_difficulty", cv > 0.1, format!("coefficient of variation {cv:.4} (target > 0.1)")),
            Check::reported(
                "mrd_predicts_updates",
                rho.is_some_and(|r| r <= -0.6),
                format!("Spearman(MRD, updates) = {} (target ≤ −0.6)", rho.map_or("n/a".into(), |r| format!("{r:.4}"))),
            ),
        ],
    };
    if let Some(out) = out {
        out.csv("diffvar.csv", &rows)?;
        out.json("summary.json", &summary)?;
    }
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unlearn::UpdateRule;

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let partial =
            ExperimentConfig::from_overrides(serde_json::json!({"seed": 7, "unlearn": {"method": "npo"}, "model": {"num_layers": 1}}))
                .unwrap();
        assert_eq!(partial.model.num_layers, 1);
        assert_eq!(partial.model.embed_dim, cfg.model.embed_dim);
        assert_eq!(partial.unlearn.learning_rate, cfg.unlearn.learning_rate);
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.unlearn.method, Method::Npo);
        assert_eq!(partial.unlearn.update_rule, UpdateRule::Sgd);
        assert_eq!(partial.mrd, MrdSettings::default());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.unlearn.learning_rate = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.checkpoint_path = Some("/definitely/not/here.ckpt".into());
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sensitivity_checks_follow_thresholds() {
        let rows = |s10: f64, s100: f64| {
            vec![
                KSweepRow { k: 10, mean_value: 1.0, std: s10 },
                KSweepRow { k: 100, mean_value: 1.0, std: s100 },
            ]
        };
        let pairs = vec![SigmaPairRow { multiplier_a: 1.0, multiplier_b: 2.0, spearman: 0.95 }];
        assert!(all_asserted_pass(&sensitivity_checks(&rows(1.0, 0.3), &pairs)));
        // ratio 10 is outside the factor-2 band around √10
        assert!(!all_asserted_pass(&sensitivity_checks(&rows(1.0, 0.1), &pairs)));
        let low = vec![SigmaPairRow { multiplier_a: 1.0, multiplier_b: 2.0, spearman: 0.5 }];
        assert!(!all_asserted_pass(&sensitivity_checks(&rows(1.0, 0.3), &low)));
    }
}
