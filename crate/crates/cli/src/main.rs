//! `forgetbench` command-line runner.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 numerical
//! failure, 4 an asserted check of `compare` or `sensitivity` failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forgetbench::exec;
use forgetbench::experiments::{self, all_asserted_pass, Check, ExperimentConfig, Output};
use forgetbench::unlearn::{Method, Weighting};
use forgetbench::Error;

/// Verbs whose failed checks turn into exit code 4. The other verbs record
/// their checks in the summary only.
const GATED_VERBS: [&str; 2] = ["compare", "sensitivity"];

/// Environment variable holding the worker-thread count.
const WORKERS_ENV: &str = "FORGETBENCH_THREADS";

#[derive(Parser)]
#[command(name = "forgetbench", version, about = "Memorization-aware unlearning experiments on a toy language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and train the model.
    Train(Common),
    /// Estimate MRD for every forget sample with both estimators.
    Mrd(Common),
    /// Run one unlearning method on the forget split.
    Unlearn(Common),
    /// Compute every metric on the configured model.
    Evaluate(Common),
    /// MRD by frequency, complexity, rare-token and initial-probability tier.
    Characteristics(Common),
    /// MRD stability across sample counts K and perturbation scales σ.
    Sensitivity(Common),
    /// Every method over several seeds.
    Compare(Common),
    /// Per-sample unlearning difficulty.
    Diffvar(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Mrd,
    Inverse,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Mrd => Weighting::MrdProportional,
            WeightingArg::Inverse => Weighting::InverseMrdProportional,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for the corpus, model, training and unlearning streams.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (default: runs/<command>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Unlearning method (sga, cga, graddiff, npo, po).
    #[arg(long, value_name = "NAME")]
    method: Option<Method>,
    /// CGA sampling weights.
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    /// Reuse a trained checkpoint instead of training.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Reuse a corpus file instead of generating one.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Train(c) => ("train", c),
            Command::Mrd(c) => ("mrd", c),
            Command::Unlearn(c) => ("unlearn", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::Characteristics(c) => ("characteristics", c),
            Command::Sensitivity(c) => ("sensitivity", c),
            Command::Compare(c) => ("compare", c),
            Command::Diffvar(c) => ("diffvar", c),
        }
    }
}

/// Defaults, then the file, then flags.
fn resolve_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = c.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    if let Some(m) = c.method {
        cfg.unlearn.method = m;
        if !cfg.compare.methods.contains(&m) || cfg.compare.methods.len() > 2 {
            cfg.compare.methods = if m == Method::Sga { vec![m] } else { vec![Method::Sga, m] };
        }
    }
    if let Some(w) = c.weighting {
        cfg.unlearn.weighting = w.into();
        cfg.compare.weightings = vec![w.into()];
    }
    if let Some(p) = &c.checkpoint {
        cfg.checkpoint_path = Some(p.clone());
    }
    if let Some(p) = &c.corpus {
        cfg.corpus_path = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Sample { source, .. } => exit_code(source),
        Error::NumericalFailure { .. } | Error::DegenerateToken { .. } | Error::DegenerateWeight(_) => 3,
        _ => 2,
    }
}

fn configure_workers() -> Result<(), Error> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize =
                v.trim().parse().map_err(|_| Error::InvalidArgument(format!("{WORKERS_ENV}={v:?} is not a count")))?;
            exec::set_worker_count(n)
        }
        Err(_) => Ok(()),
    }
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        let status = match (c.passed, c.asserted) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS",
        };
        let kind = if c.asserted { "" } else { " (reported)" };
        println!("{status} {}{kind}: {}", c.name, c.detail);
    }
}

fn run(verb: &str, cfg: &ExperimentConfig, out: &Output) -> Result<Vec<Check>, Error> {
    let checks = match verb {
        "train" => experiments::cmd_train(cfg, Some(out))?.1.checks,
        "mrd" => experiments::cmd_mrd(cfg, Some(out))?.1.checks,
        "unlearn" => {
            let (_, s) = experiments::cmd_unlearn(cfg, Some(out))?;
            println!(
                "{}: M = {}, forgotten {}/{}, stop {:?}",
                s.method, s.total_updates, s.forgotten, s.forget_size, s.stop_reason
            );
            vec![]
        }
        "evaluate" => {
            let r = experiments::cmd_evaluate(cfg, Some(out))?;
            if let Some((ua, mia, rr, avg)) = r.completeness() {
                println!("UA {ua:.4}  MIA {mia:.4}  RR {rr:.4}  mean {avg:.4}");
            }
            vec![]
        }
        "characteristics" => experiments::cmd_characteristics(cfg, Some(out))?.1.checks,
        "sensitivity" => experiments::cmd_sensitivity(cfg, Some(out))?.checks,
        "compare" => experiments::cmd_compare(cfg, Some(out))?.checks,
        "diffvar" => experiments::cmd_diffvar(cfg, Some(out))?.1.checks,
        other => unreachable!("unknown verb {other}"),
    };
    Ok(checks)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, common) = cli.command.parts();
    let result = configure_workers().and_then(|_| {
        let cfg = resolve_config(common)?;
        let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(verb));
        let out = Output::create(&dir, &cfg)?;
        let checks = run(verb, &cfg, &out)?;
        println!("outputs in {}", out.dir().display());
        Ok(checks)
    });
    match result {
        Ok(checks) => {
            print_checks(&checks);
            if !GATED_VERBS.contains(&verb) || all_asserted_pass(&checks) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
