//! Simulation protocols and the Monte Carlo harness.
//!
//! Each population seed fixes one finite population; replications then
//! redraw only the assignment and the split. Replication `r` of population
//! seed `s` reads ChaCha8 stream `r + 1` of seed `s` (stream 0 builds the
//! population), so results do not depend on thread count or scheduling.

use std::f64::consts::PI;

use ccfit_core::designs::Design;
use ccfit_core::estimators::{cross_fit_with_split, Strictness};
use ccfit_core::math::{kahan_sum, Matrix};
use ccfit_core::predictors::{build_full_training_set, Learner, PredictorSpec};
use ccfit_core::splitters::{assemble, split, SplitPlan};
use ccfit_core::variance::{confidence_interval, fold_variance, variance_cf};
use ccfit_core::{adjusted_estimate, ht_estimate, Population};
use rand::distr::Open01;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Linear,
    Nonlinear,
    OptimalSplit,
}

/// Noise added to the treated potential outcome in the linear experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Noise {
    /// Centered hat-matrix leverage of each unit, scaled to unit variance.
    #[default]
    Leverage,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Same predictor family fitted once on the full sample.
    PlugIn,
    DifferenceInMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub experiment: Experiment,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Number of population seeds.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    pub replications: usize,
    /// Units per population. Defaults: 300 linear, 400 nonlinear, 1000
    /// optimal-split.
    #[serde(default)]
    pub n: Option<usize>,
    /// Linear: d = floor(n^gamma). Nonlinear: n = floor(10^gamma).
    #[serde(default)]
    pub gammas: Vec<f64>,
    /// Optimal-split: treated share of fold 1.
    #[serde(default)]
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub predictors: Vec<PredictorSpec>,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub noise: Noise,
    /// Bernoulli treatment probability (linear 0.5, nonlinear 0.8).
    #[serde(default)]
    pub treated_fraction: Option<f64>,
    /// Bernoulli split probability for fold 1.
    #[serde(default = "default_pi")]
    pub split_fraction: f64,
}

fn default_seed() -> u64 {
    20_240_601
}

fn default_seeds() -> usize {
    1
}

fn default_alpha() -> f64 {
    0.05
}

fn default_pi() -> f64 {
    0.5
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ccfit_core::Error),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        if self.seeds < 1 {
            return bad("seeds must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction {} outside (0, 1)", self.split_fraction));
        }
        if let Some(r) = self.treated_fraction {
            if !(r > 0.0 && r < 1.0) {
                return bad(format!("treated_fraction {r} outside (0, 1)"));
            }
        }
        if self.predictors.is_empty() && self.baselines.is_empty() {
            return bad("no predictors or baselines to run".into());
        }
        if self.experiment == Experiment::OptimalSplit {
            let n = self.n.unwrap_or(1000);
            if n % 4 != 0 {
                return bad(format!("optimal-split needs n divisible by 4, got {n}"));
            }
            if self.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
                return bad("ratios must lie in (0, 1)".into());
            }
        }
        for p in self.grid()? {
            if p.n < 4 {
                return bad(format!("n = {} is too small", p.n));
            }
            if p.d >= p.n {
                return bad(format!("d = {} must be below n = {}", p.d, p.n));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Vec<GridPoint>, SimError> {
        Ok(match self.experiment {
            Experiment::Linear => {
                let n = self.n.unwrap_or(300);
                let gammas = if self.gammas.is_empty() { vec![0.5] } else { self.gammas.clone() };
                gammas.iter().map(|&g| GridPoint { label: "gamma", value: g, n, d: floor_pow(n as f64, g).max(1) }).collect()
            }
            Experiment::Nonlinear => {
                if self.gammas.is_empty() {
                    let n = self.n.unwrap_or(400);
                    vec![GridPoint { label: "n", value: n as f64, n, d: 1 }]
                } else {
                    self.gammas.iter().map(|&g| GridPoint { label: "gamma", value: g, n: floor_pow(10.0, g), d: 1 }).collect()
                }
            }
            Experiment::OptimalSplit => {
                let n = self.n.unwrap_or(1000);
                let ratios =
                    if self.ratios.is_empty() { vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8] } else { self.ratios.clone() };
                ratios.iter().map(|&r| GridPoint { label: "r", value: r, n, d: 2 }).collect()
            }
        })
    }

    fn treated_fraction(&self) -> f64 {
        self.treated_fraction.unwrap_or(match self.experiment {
            Experiment::Nonlinear => 0.8,
            _ => 0.5,
        })
    }
}

/// floor(base^exp), nudged so exact powers are not lost to rounding.
pub fn floor_pow(base: f64, exp: f64) -> usize {
    (base.powf(exp) + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub label: &'static str,
    pub value: f64,
    pub n: usize,
    pub d: usize,
}

/// Inverse CDF of Student's t for 1 to 4 degrees of freedom.
pub fn student_t_quantile(df: u32, u: f64) -> f64 {
    match df {
        1 => (PI * (u - 0.5)).tan(),
        2 => (2.0 * u - 1.0) / (2.0 * u * (1.0 - u)).sqrt(),
        3 => t3_quantile(u),
        4 => {
            let a = 4.0 * u * (1.0 - u);
            let q = ((a.sqrt()).acos() / 3.0).cos() / a.sqrt();
            (u - 0.5).signum() * 2.0 * (q - 1.0).max(0.0).sqrt()
        }
        _ => panic!("t quantile implemented for 1..=4 degrees of freedom, got {df}"),
    }
}

fn t3_cdf(t: f64) -> f64 {
    let s = t / 3f64.sqrt();
    0.5 + (s / (1.0 + s * s) + s.atan()) / PI
}

fn t3_pdf(t: f64) -> f64 {
    let b = 1.0 + t * t / 3.0;
    2.0 / (PI * 3f64.sqrt() * b * b)
}

// Safeguarded Newton on the closed-form CDF.
fn t3_quantile(u: f64) -> f64 {
    if u == 0.5 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while t3_cdf(lo) > u {
        lo *= 2.0;
    }
    while t3_cdf(hi) < u {
        hi *= 2.0;
    }
    let mut t = student_t_quantile(4, u).clamp(lo, hi);
    for _ in 0..200 {
        let f = t3_cdf(t) - u;
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let mut next = t - f / t3_pdf(t);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * (1.0 + t.abs()) {
            return next;
        }
        t = next;
    }
    t
}

fn sample_t<R: Rng>(rng: &mut R, df: u32) -> f64 {
    let u: f64 = rng.sample(Open01);
    student_t_quantile(df, u)
}

fn center_columns(x: &mut Matrix) {
    for c in 0..x.cols() {
        let m = kahan_sum((0..x.rows()).map(|i| x.get(i, c))) / x.rows() as f64;
        for i in 0..x.rows() {
            x.set(i, c, x.get(i, c) - m);
        }
    }
}

/// Hat-matrix diagonal of `x` (no intercept column) via a Cholesky factor
/// of x'x.
pub fn leverages(x: &Matrix) -> Result<Vec<f64>, SimError> {
    let (n, d) = (x.rows(), x.cols());
    let mut g = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            for b in 0..=a {
                g[a * d + b] += r[a] * r[b];
            }
        }
    }
    // lower-triangular L with L L' = g
    let mut l = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..=a {
            let s = g[a * d + b] - (0..b).map(|k| l[a * d + k] * l[b * d + k]).sum::<f64>();
            if a == b {
                if s <= 0.0 {
                    return Err(SimError::Config("covariate Gram matrix is not positive definite".into()));
                }
                l[a * d + a] = s.sqrt();
            } else {
                l[a * d + b] = s / l[b * d + b];
            }
        }
    }
    Ok((0..n)
        .map(|i| {
            let r = x.row(i);
            let mut v = vec![0.0; d];
            let mut h = 0.0;
            for a in 0..d {
                let s = r[a] - (0..a).map(|k| l[a * d + k] * v[k]).sum::<f64>();
                v[a] = s / l[a * d + a];
                h += v[a] * v[a];
            }
            h
        })
        .collect())
}

/// Pieces of a linear-experiment population.
#[derive(Debug, Clone)]
pub struct LinearParts {
    pub x: Matrix,
    pub theta: Vec<f64>,
    pub eps1: Vec<f64>,
    pub eps0: Vec<f64>,
}

pub fn gen_linear_parts(seed: u64, n: usize, d: usize, noise: Noise) -> Result<LinearParts, SimError> {
    if n < 1 || d < 1 {
        return Err(SimError::Config(format!("need n, d >= 1, got n = {n}, d = {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        for c in 0..d {
            x.set(i, c, sample_t(&mut rng, 2));
        }
    }
    center_columns(&mut x);
    let theta = vec![1.0 / (d as f64).sqrt(); d];
    let eps1 = match noise {
        Noise::Gaussian => (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
        Noise::Leverage => {
            let h = leverages(&x)?;
            standardize(&h)
        }
    };
    let small = Normal::new(0.0, 0.01).expect("valid normal");
    let eps0 = (0..n).map(|_| small.sample(&mut rng)).collect();
    Ok(LinearParts { x, theta, eps1, eps0 })
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = kahan_sum(v.iter().copied()) / n;
    let sd = (kahan_sum(v.iter().map(|a| (a - m) * (a - m))) / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|a| (a - m) / sd).collect()
}

/// Y(1) = x'theta + eps(1), Y(0) = eps(0), with centered t(2) covariates.
pub fn gen_linear_population(seed: u64, n: usize, d: usize, noise: Noise) -> Result<Population, SimError> {
    let p = gen_linear_parts(seed, n, d, noise)?;
    let y1 = (0..n).map(|i| p.x.row(i).iter().zip(&p.theta).map(|(a, b)| a * b).sum::<f64>() + p.eps1[i]).collect();
    Ok(Population::new(p.x, y1, p.eps0, None)?)
}

fn poisson<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    Poisson::new(rate).expect("positive finite Poisson rate").sample(rng)
}

/// x ~ U[-5, 5], Y(1) ~ Poisson(e^x), Y(0) ~ Poisson(72 - 0.45 e^x).
pub fn gen_nonlinear_population(seed: u64, n: usize) -> Result<Population, SimError> {
    if n < 1 {
        return Err(SimError::Config("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, 1);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for i in 0..n {
        let xi = rng.random_range(-5.0..=5.0);
        x.set(i, 0, xi);
        y1.push(poisson(&mut rng, xi.exp()));
        y0.push(poisson(&mut rng, 72.0 - 0.45 * xi.exp()));
    }
    Ok(Population::new(x, y1, y0, None)?)
}

pub const RATE_CLIP: f64 = 20.0;

/// Coefficient pair of the optimal-split population: normalized t(3) draws.
pub fn optimal_split_coefficients(seed: u64) -> [Vec<f64>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let v: Vec<f64> = (0..2).map(|_| sample_t(&mut rng, 3)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter().map(|a| a / norm).collect::<Vec<_>>()
    };
    let b1 = draw();
    let b0 = draw();
    [b0, b1]
}

/// x ~ N(0, I_2), Y(z) ~ Poisson(exp(clip(x'beta_z, +/-20))) under
/// CRE{n, n/2}; n = 1000 in the reference setting.
pub fn gen_optimal_split_population(seed: u64, n: usize) -> Result<(Population, Design), SimError> {
    if n < 2 || n % 2 != 0 {
        return Err(SimError::Config(format!("n must be even and positive, got {n}")));
    }
    let [b0, b1] = optimal_split_coefficients(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut x = Matrix::zeros(n, 2);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for i in 0..n {
        for c in 0..2 {
            x.set(i, c, rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
        let eta = |b: &[f64]| (x.get(i, 0) * b[0] + x.get(i, 1) * b[1]).clamp(-RATE_CLIP, RATE_CLIP);
        y1.push(poisson(&mut rng, eta(&b1).exp()));
        y0.push(poisson(&mut rng, eta(&b0).exp()));
    }
    Ok((Population::new(x, y1, y0, None)?, Design::Complete { n, n1: n / 2 }))
}

/// Seed of population `j` derived from the base seed (SplitMix64 step).
pub fn population_seed(base: u64, j: usize) -> u64 {
    let mut z = base.wrapping_add((j as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn replication_rng(pop_seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(pop_seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

/// One method's outcome in one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Draw {
    Ok { tau: f64, v: Option<f64> },
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub grid: String,
    pub grid_value: f64,
    pub n: usize,
    pub d: usize,
    pub method: String,
    /// Population seed, or `median` for the across-seed summary.
    pub seed: String,
    pub replications: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub tau_true: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Monte Carlo variance with divisor R, so mse = bias^2 + variance.
    pub variance: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub coverage: Option<f64>,
    pub mean_v: Option<f64>,
    /// mean_v over the sample variance (divisor R - 1).
    pub inflation: Option<f64>,
    /// Standard error of the sample variance, from the fourth moment.
    pub variance_se: f64,
}

pub struct MethodDraws {
    pub method: String,
    pub draws: Vec<Draw>,
}

/// Summary statistics of one method over one population's replications.
pub fn summarize(draws: &[Draw], tau_true: f64, alpha: f64) -> Summary {
    let ok: Vec<(f64, Option<f64>)> =
        draws.iter().filter_map(|d| if let Draw::Ok { tau, v } = d { Some((*tau, *v)) } else { None }).collect();
    let r = ok.len() as f64;
    let failures = draws.len() - ok.len();
    if ok.is_empty() {
        return Summary { failures, ..Summary::empty() };
    }
    let mean = kahan_sum(ok.iter().map(|t| t.0)) / r;
    let m2 = kahan_sum(ok.iter().map(|t| (t.0 - mean).powi(2))) / r;
    let m4 = kahan_sum(ok.iter().map(|t| (t.0 - mean).powi(4))) / r;
    let sq: Vec<f64> = ok.iter().map(|t| (t.0 - tau_true).powi(2)).collect();
    let mse = kahan_sum(sq.iter().copied()) / r;
    let mse_sd = (kahan_sum(sq.iter().map(|s| (s - mse).powi(2))) / (r - 1.0).max(1.0)).sqrt();
    let sample_var = if ok.len() > 1 { m2 * r / (r - 1.0) } else { f64::NAN };
    let variance_se = if ok.len() > 3 {
        ((m4 - m2 * m2 * (r - 3.0) / (r - 1.0)) / r).max(0.0).sqrt()
    } else {
        f64::NAN
    };
    let with_v: Vec<(f64, f64)> = ok.iter().filter_map(|(t, v)| v.map(|v| (*t, v))).collect();
    let (coverage, mean_v) = if with_v.len() == ok.len() {
        let covered = with_v
            .iter()
            .filter(|(t, v)| {
                let (lo, hi) = confidence_interval(*t, *v, alpha).expect("validated alpha and v >= 0");
                lo <= tau_true && tau_true <= hi
            })
            .count();
        (Some(covered as f64 / r), Some(kahan_sum(with_v.iter().map(|p| p.1)) / r))
    } else {
        (None, None)
    };
    Summary {
        successes: ok.len(),
        failures,
        mean,
        bias: mean - tau_true,
        variance: m2,
        mse,
        mse_se: mse_sd / r.sqrt(),
        coverage,
        mean_v,
        inflation: mean_v.map(|m| m / sample_var),
        variance_se,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub successes: usize,
    pub failures: usize,
    pub mean: f64,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub coverage: Option<f64>,
    pub mean_v: Option<f64>,
    pub inflation: Option<f64>,
    pub variance_se: f64,
}

impl Summary {
    fn empty() -> Self {
        Self {
            successes: 0,
            failures: 0,
            mean: f64::NAN,
            bias: f64::NAN,
            variance: f64::NAN,
            mse: f64::NAN,
            mse_se: f64::NAN,
            coverage: None,
            mean_v: None,
            inflation: None,
            variance_se: f64::NAN,
        }
    }
}

pub fn method_names(cfg: &SimConfig) -> Vec<String> {
    let mut out: Vec<String> = cfg.predictors.iter().map(|p| format!("cross-fit:{}", p.id())).collect();
    for b in &cfg.baselines {
        match b {
            Baseline::PlugIn => out.extend(cfg.predictors.iter().map(|p| format!("plug-in:{}", p.id()))),
            Baseline::DifferenceInMeans => out.push("difference-in-means".into()),
        }
    }
    out
}

fn estimate_with_v(
    obs: &ccfit_core::ObservedData,
    s: &ccfit_core::SplitResult,
    learner: &dyn Learner,
    alpha: f64,
) -> Draw {
    match cross_fit_with_split(obs, s, learner, Strictness::Strict) {
        Ok(est) => match variance_cf(&est, alpha) {
            Ok(v) => Draw::Ok { tau: est.tau_hat, v: Some(v.v_cf) },
            Err(_) => Draw::Failed,
        },
        Err(_) => Draw::Failed,
    }
}

fn plug_in(obs: &ccfit_core::ObservedData, design: &Design, learner: &dyn Learner) -> Draw {
    let Ok(train) = build_full_training_set(obs, design) else { return Draw::Failed };
    let fitted = match learner.fit(&train) {
        Ok(f) => f,
        Err(_) => match learner.fit_relaxed(&train) {
            Ok(f) => f,
            Err(_) => return Draw::Failed,
        },
    };
    match adjusted_estimate(obs, design, &fitted) {
        Ok(tau) => Draw::Ok { tau, v: None },
        Err(_) => Draw::Failed,
    }
}

fn difference_in_means(obs: &ccfit_core::ObservedData, design: &Design) -> Draw {
    match (ht_estimate(obs, design), fold_variance(design, &obs.z, &obs.y)) {
        (Ok(tau), Ok(v)) => Draw::Ok { tau, v: Some(v) },
        _ => Draw::Failed,
    }
}

/// Bernoulli experiments (linear and nonlinear): per replication one
/// assignment and one split shared by every method.
pub fn bernoulli_replication(cfg: &SimConfig, pop: &Population, design: &Design, rng: &mut ChaCha8Rng) -> Vec<Draw> {
    let z = design.sample(rng);
    let obs = pop.realize(&z).expect("sampled assignment matches population");
    let plan = SplitPlan::Bernoulli { pi: cfg.split_fraction };
    let s = split(&plan, design, &z, rng);
    let mut out = Vec::new();
    for p in &cfg.predictors {
        out.push(match &s {
            Ok(s) => estimate_with_v(&obs, s, p, cfg.alpha),
            Err(_) => Draw::Failed,
        });
    }
    for b in &cfg.baselines {
        match b {
            Baseline::PlugIn => out.extend(cfg.predictors.iter().map(|p| plug_in(&obs, design, p))),
            Baseline::DifferenceInMeans => out.push(difference_in_means(&obs, design)),
        }
    }
    out
}

/// Optimal-split replications: one assignment and one random ordering of
/// each arm; fold 1 takes a prefix of each ordering, so every ratio's split
/// is uniform over its plan and the grid shares common random numbers.
fn ratio_replication(cfg: &SimConfig, pop: &Population, design: &Design, grid: &[GridPoint], rng: &mut ChaCha8Rng) -> Vec<Vec<Draw>> {
    let z = design.sample(rng);
    let obs = pop.realize(&z).expect("sampled assignment matches population");
    let mut treated: Vec<usize> = (0..z.len()).filter(|&i| z[i] == 1).collect();
    let mut control: Vec<usize> = (0..z.len()).filter(|&i| z[i] == 0).collect();
    treated.shuffle(rng);
    control.shuffle(rng);
    let half = z.len() / 2;
    grid.iter()
        .map(|g| {
            let a = (g.value * half as f64).round() as usize;
            let b = half - a;
            let plan = SplitPlan::ByTreatment { fold1_treated: a, fold1_control: b };
            let mut membership = vec![2u8; z.len()];
            for &i in treated.iter().take(a).chain(control.iter().take(b)) {
                membership[i] = 1;
            }
            let s = assemble(&plan, design, membership);
            let mut out = Vec::new();
            for p in &cfg.predictors {
                out.push(match &s {
                    Ok(s) if a > 0 && b > 0 => estimate_with_v(&obs, s, p, cfg.alpha),
                    _ => Draw::Failed,
                });
            }
            for bl in &cfg.baselines {
                match bl {
                    Baseline::PlugIn => out.extend(cfg.predictors.iter().map(|p| plug_in(&obs, design, p))),
                    Baseline::DifferenceInMeans => out.push(difference_in_means(&obs, design)),
                }
            }
            out
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|a| !a.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn median_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<Option<f64>> = v.collect();
    if vals.iter().any(|a| a.is_none()) {
        return None;
    }
    Some(median(vals.into_iter().flatten().collect()))
}

fn experiment_name(e: Experiment) -> &'static str {
    match e {
        Experiment::Linear => "linear",
        Experiment::Nonlinear => "nonlinear",
        Experiment::OptimalSplit => "optimal-split",
    }
}

fn make_row(cfg: &SimConfig, g: &GridPoint, method: &str, seed: String, tau_true: f64, reps: usize, s: &Summary) -> MetricsRow {
    MetricsRow {
        experiment: experiment_name(cfg.experiment).into(),
        grid: g.label.into(),
        grid_value: g.value,
        n: g.n,
        d: g.d,
        method: method.into(),
        seed,
        replications: reps,
        failures: s.failures,
        failure_rate: s.failures as f64 / reps as f64,
        tau_true,
        mean_estimate: s.mean,
        bias: s.bias,
        variance: s.variance,
        mse: s.mse,
        mse_se: s.mse_se,
        coverage: s.coverage,
        mean_v: s.mean_v,
        inflation: s.inflation,
        variance_se: s.variance_se,
    }
}

fn median_row(rows: &[&MetricsRow]) -> MetricsRow {
    let med = |f: &dyn Fn(&MetricsRow) -> f64| median(rows.iter().map(|r| f(r)).collect());
    let first = rows[0];
    MetricsRow {
        seed: "median".into(),
        failures: rows.iter().map(|r| r.failures).sum(),
        failure_rate: med(&|r| r.failure_rate),
        tau_true: med(&|r| r.tau_true),
        mean_estimate: med(&|r| r.mean_estimate),
        bias: med(&|r| r.bias),
        variance: med(&|r| r.variance),
        mse: med(&|r| r.mse),
        mse_se: med(&|r| r.mse_se),
        coverage: median_opt(rows.iter().map(|r| r.coverage)),
        mean_v: median_opt(rows.iter().map(|r| r.mean_v)),
        inflation: median_opt(rows.iter().map(|r| r.inflation)),
        variance_se: med(&|r| r.variance_se),
        ..first.clone()
    }
}

/// Runs every grid point, seed and replication; returns the per-seed rows
/// followed by the across-seed median rows (when there is more than one
/// seed), grid point by grid point.
pub fn run_replications(cfg: &SimConfig) -> Result<Vec<MetricsRow>, SimError> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let methods = method_names(cfg);
    // per grid point, per seed: (tau_true, draws per method)
    let mut per_point: Vec<Vec<(u64, f64, Vec<Vec<Draw>>)>> = vec![Vec::new(); grid.len()];
    for j in 0..cfg.seeds {
        let pop_seed = population_seed(cfg.seed, j);
        match cfg.experiment {
            Experiment::OptimalSplit => {
                let (pop, design) = gen_optimal_split_population(pop_seed, grid[0].n)?;
                let reps: Vec<Vec<Vec<Draw>>> = (0..cfg.replications)
                    .into_par_iter()
                    .map(|r| ratio_replication(cfg, &pop, &design, &grid, &mut replication_rng(pop_seed, r)))
                    .collect();
                for (gi, slot) in per_point.iter_mut().enumerate() {
                    let draws = (0..methods.len()).map(|m| reps.iter().map(|rep| rep[gi][m]).collect()).collect();
                    slot.push((pop_seed, pop.ate_true(), draws));
                }
            }
            _ => {
                for (gi, g) in grid.iter().enumerate() {
                    let pop = match cfg.experiment {
                        Experiment::Linear => gen_linear_population(pop_seed, g.n, g.d, cfg.noise)?,
                        _ => gen_nonlinear_population(pop_seed, g.n)?,
                    };
                    let design = Design::Bernoulli { n: g.n, r1: cfg.treated_fraction() };
                    let reps: Vec<Vec<Draw>> = (0..cfg.replications)
                        .into_par_iter()
                        .map(|r| bernoulli_replication(cfg, &pop, &design, &mut replication_rng(pop_seed, r)))
                        .collect();
                    let draws = (0..methods.len()).map(|m| reps.iter().map(|rep| rep[m]).collect()).collect();
                    per_point[gi].push((pop_seed, pop.ate_true(), draws));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (gi, g) in grid.iter().enumerate() {
        let mut block = Vec::new();
        for (seed, tau, draws) in &per_point[gi] {
            for (m, name) in methods.iter().enumerate() {
                let s = summarize(&draws[m], *tau, cfg.alpha);
                block.push(make_row(cfg, g, name, seed.to_string(), *tau, cfg.replications, &s));
            }
        }
        let mut medians = Vec::new();
        for name in methods.iter().filter(|_| cfg.seeds > 1) {
            let same: Vec<&MetricsRow> = block.iter().filter(|r| &r.method == name).collect();
            medians.push(median_row(&same));
        }
        rows.extend(block);
        rows.extend(medians);
    }
    Ok(rows)
}

/// The across-seed summary rows, or the per-seed rows of a single-seed run.
pub fn medians(rows: &[MetricsRow]) -> Vec<&MetricsRow> {
    if rows.iter().any(|r| r.seed == "median") {
        rows.iter().filter(|r| r.seed == "median").collect()
    } else {
        rows.iter().collect()
    }
}
