//! Command-line surface. Exit codes: 0 success, 1 failed verification,
//! 2 parse or contract violation, 3 estimator failure.

use std::path::{Path, PathBuf};

use ccfit_core::designs::DEFAULT_SUPPORT_CAP;
use ccfit_core::splitters::default_plan;
use ccfit_core::{cross_fit_estimate, split, variance_cf, Error, Learner};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fixtures::{parse_corpus, run_corpus, shipped_corpus, verify_csv, CLAIMS};
use crate::io::{self, InputError, RunManifest};
use crate::plot::render_svg;
use crate::simlab::{run_replications, SimConfig, SimError};

#[derive(Debug, Parser)]
#[command(name = "ccfit", version, about = "Conditional cross-fitting for randomized experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-fitted ATE estimate, variance and confidence interval.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// auto, cre, cre:N1, bre:R1, sre, sre:T1,T2,.., mpe, or JSON.
        #[arg(long, default_value = "auto")]
        design: String,
        /// default, bernoulli:PI, by-treatment:A,B, by-stratum:K, or JSON.
        #[arg(long, default_value = "default")]
        plan: String,
        /// zero, mean, ols, wls-strata, tom, paired-diff, poisson,
        /// calibrated:NAME, or JSON.
        #[arg(long, default_value = "ols")]
        predictor: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON result path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo study from a JSON config; writes a metrics CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write line plots of the median rows next to the CSV.
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Exhaustive-enumeration checks over the fixture corpus.
    Verify {
        #[arg(long)]
        claim: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SUPPORT_CAP)]
        cap: u64,
        /// Corpus JSON; the shipped corpus when absent.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Pass/fail CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draws one split and writes fold labels with conditional probabilities.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "auto")]
        design: String,
        #[arg(long, default_value = "default")]
        plan: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Contract(String),
    Estimator(String),
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Contract(_) => 2,
            Failure::Estimator(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Contract(m) | Failure::Estimator(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<InputError> for Failure {
    fn from(e: InputError) -> Self {
        Failure::Contract(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::DesignMismatch(_)
            | Error::LengthMismatch { .. }
            | Error::InvalidInput(_)
            | Error::InvalidDesign(_)
            | Error::PlanIncompatible(_)
            | Error::DegenerateStratum { .. } => Failure::Contract(e.to_string()),
            _ => Failure::Estimator(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => Failure::Contract(e.to_string()),
            SimError::Core(c) => c.into(),
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => Ok(io::write_file(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct FoldReport {
    fold: u8,
    n: usize,
    n_treated: usize,
    mu1: f64,
    mu0: f64,
    tau: f64,
    v: Option<f64>,
    predictor: ccfit_core::predictors::FitDiagnostics,
}

#[derive(Serialize)]
struct EstimateReport {
    tau_hat: f64,
    /// `None` when a fold has too few units per arm for its variance
    /// estimator; the point estimate is still reported.
    v_cf: Option<f64>,
    se: Option<f64>,
    ci: Option<[f64; 2]>,
    variance_error: Option<String>,
    alpha: f64,
    design: ccfit_core::Design,
    plan: ccfit_core::SplitPlan,
    predictor: String,
    folds: Vec<FoldReport>,
    fallbacks: Vec<String>,
    manifest: RunManifest,
}

fn check_design(design: &ccfit_core::Design, observed: &ccfit_core::ObservedData) -> Result<(), Failure> {
    design.validate()?;
    if observed.n() != design.n() {
        return Err(Error::DesignMismatch(format!("design has {} units, data has {}", design.n(), observed.n())).into());
    }
    if !design.in_support(&observed.z) {
        return Err(Error::DesignMismatch("assignment is outside the design's support".into()).into());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    argv: &[String],
    data: &Path,
    design: &str,
    plan: &str,
    predictor: &str,
    alpha: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let started = io::now_unix();
    let text = io::read_to_string(data)?;
    let ds = io::parse_dataset(&text)?;
    let design = io::parse_design(design, &ds)?;
    check_design(&design, &ds.observed)?;
    let plan = match io::parse_plan(plan)? {
        Some(p) => p,
        None => default_plan(&design)?,
    };
    let learner = io::parse_predictor(predictor)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Failure::Contract(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = cross_fit_estimate(&ds.observed, &design, &plan, &learner, &mut rng)?;
    let (v, variance_error) = match variance_cf(&est, alpha) {
        Ok(v) => (Some(v), None),
        Err(e @ Error::InsufficientReplication(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let folds = (0..2)
        .map(|q| FoldReport {
            fold: q as u8 + 1,
            n: est.split.fold_units[q].len(),
            n_treated: est.split.fold_units[q].iter().filter(|&&i| est.z[i] == 1).count(),
            mu1: est.fold_mu[q][1],
            mu0: est.fold_mu[q][0],
            tau: est.fold_tau[q],
            v: v.as_ref().map(|v| v.fold_v[q]),
            predictor: est.diagnostics[q].clone(),
        })
        .collect();
    let hash = io::sha256_hex(&[
        text.as_bytes(),
        serde_json::to_string(&design).expect("serializes").as_bytes(),
        serde_json::to_string(&plan).expect("serializes").as_bytes(),
        serde_json::to_string(&learner).expect("serializes").as_bytes(),
        alpha.to_bits().to_le_bytes().as_slice(),
    ]);
    let report = EstimateReport {
        tau_hat: est.tau_hat,
        v_cf: v.as_ref().map(|v| v.v_cf),
        se: v.as_ref().map(|v| v.v_cf.sqrt()),
        ci: v.as_ref().map(|v| [v.ci.0, v.ci.1]),
        variance_error,
        alpha,
        design,
        plan,
        predictor: learner.id(),
        folds,
        fallbacks: est.fallbacks.clone(),
        manifest: RunManifest::new(argv.to_vec(), hash, Some(seed), started),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    emit(out, &json)
}

fn simulate(
    argv: &[String],
    config: &Path,
    out: &Path,
    plot: bool,
    replications: Option<usize>,
    seeds: Option<usize>,
) -> Result<(), Failure> {
    let started = io::now_unix();
    let text = io::read_to_string(config)?;
    let mut cfg: SimConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Contract(format!("{}: {e}", config.display())))?;
    if let Some(r) = replications {
        cfg.replications = r;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let rows = run_replications(&cfg)?;
    io::write_file(out, io::metrics_csv(&rows).as_bytes())?;
    let hash = io::sha256_hex(&[serde_json::to_string(&cfg).expect("config serializes").as_bytes()]);
    let manifest = RunManifest::new(argv.to_vec(), hash, Some(cfg.seed), started);
    io::write_manifest(out, &manifest)?;
    if plot {
        let svg_path = out.with_extension("svg");
        io::write_file(&svg_path, render_svg(&rows).as_bytes())?;
        io::write_manifest(&svg_path, &manifest)?;
    }
    Ok(())
}

fn verify(argv: &[String], claim: Option<&str>, cap: u64, fixtures: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let started = io::now_unix();
    if let Some(c) = claim {
        if !CLAIMS.contains(&c) {
            return Err(Failure::Contract(format!("unknown claim '{c}'; expected one of {}", CLAIMS.join(", "))));
        }
    }
    let (corpus, source) = match fixtures {
        Some(p) => {
            let text = io::read_to_string(p)?;
            (parse_corpus(&text).map_err(|e| Failure::Contract(format!("{}: {e}", p.display())))?, text)
        }
        None => (shipped_corpus(), crate::fixtures::SHIPPED_CORPUS.to_string()),
    };
    let rows = run_corpus(&corpus, claim, cap);
    emit(out, &verify_csv(&rows))?;
    if let Some(p) = out {
        let hash = io::sha256_hex(&[source.as_bytes(), claim.unwrap_or("all").as_bytes()]);
        io::write_manifest(p, &RunManifest::new(argv.to_vec(), hash, None, started))?;
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    eprintln!("{} checks, {} passed, {} failed", rows.len(), rows.len() - failed, failed);
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} checks failed")));
    }
    Ok(())
}

fn split_cmd(argv: &[String], data: &Path, design: &str, plan: &str, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let started = io::now_unix();
    let text = io::read_to_string(data)?;
    let ds = io::parse_dataset(&text)?;
    let design = io::parse_design(design, &ds)?;
    check_design(&design, &ds.observed)?;
    let plan = match io::parse_plan(plan)? {
        Some(p) => p,
        None => default_plan(&design)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = split(&plan, &design, &ds.observed.z, &mut rng)?;
    emit(out, &io::split_csv(&s, &ds.observed.z))?;
    if let Some(p) = out {
        let hash = io::sha256_hex(&[
            text.as_bytes(),
            serde_json::to_string(&design).expect("serializes").as_bytes(),
            serde_json::to_string(&plan).expect("serializes").as_bytes(),
        ]);
        io::write_manifest(p, &RunManifest::new(argv.to_vec(), hash, Some(seed), started))?;
    }
    Ok(())
}

pub fn run(cli: Cli, argv: &[String]) -> Result<(), Failure> {
    match cli.command {
        Command::Estimate { data, design, plan, predictor, alpha, seed, out } => {
            estimate(argv, &data, &design, &plan, &predictor, alpha, seed, out.as_deref())
        }
        Command::Simulate { config, out, plot, replications, seeds } => {
            simulate(argv, &config, &out, plot, replications, seeds)
        }
        Command::Verify { claim, cap, fixtures, out } => {
            verify(argv, claim.as_deref(), cap, fixtures.as_deref(), out.as_deref())
        }
        Command::Split { data, design, plan, seed, out } => split_cmd(argv, &data, &design, &plan, seed, out.as_deref()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
