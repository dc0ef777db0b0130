//! Prediction functions fitted on one fold and evaluated on the other.
//!
//! A [`Learner`] maps a [`TrainingSet`] to a [`FittedPredictor`] holding one
//! function per arm. The shipped learners are described by
//! [`PredictorSpec`]; third-party learners implement the trait directly.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::designs::Design;
use crate::math::{kahan_sum, weighted_lstsq, LstsqFit, Matrix, RankPolicy};
use crate::population::ObservedData;
use crate::splitters::{cell_of, SplitResult};
use crate::{Error, Result};

/// Rows of the training fold S_[-q].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub arm: Vec<u8>,
    /// Stratum (or pair) index per row, from the design when it has strata.
    pub strata: Option<Vec<usize>>,
    /// Inverse of P(i in S_[-q], Z_i = z).
    pub weight: Vec<f64>,
    /// Degrees-of-freedom-corrected stratum weights; equal to `weight` for
    /// rows whose stratum was not split by treatment.
    pub dof_weight: Vec<f64>,
    /// Global unit index per row.
    pub units: Vec<usize>,
    /// The fold whose units are excluded (1 or 2).
    pub held_out: u8,
    pub design_kind: &'static str,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn arm_rows(&self, arm: u8) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.arm[r] == arm).collect()
    }

    pub fn arm_count(&self, arm: u8) -> usize {
        self.arm.iter().filter(|&&a| a == arm).count()
    }

    fn stratum(&self, r: usize) -> Option<usize> {
        self.strata.as_ref().map(|s| s[r])
    }
}

fn other_fold(q: u8) -> u8 {
    3 - q
}

/// Training rows for the predictor used on fold `held_out`, without the
/// empty-arm check.
pub(crate) fn training_rows(observed: &ObservedData, split: &SplitResult, held_out: u8) -> TrainingSet {
    let train_fold = other_fold(held_out);
    let units = split.fold_units[(train_fold - 1) as usize].clone();
    let design = &split.design;
    let strata_all: Option<Vec<usize>> =
        design.strata().map(|s| s.to_vec()).or_else(|| observed.strata.clone());
    let omega = dof_omegas(split);
    let mut y = Vec::with_capacity(units.len());
    let mut arm = Vec::with_capacity(units.len());
    let mut weight = Vec::with_capacity(units.len());
    let mut dof_weight = Vec::with_capacity(units.len());
    for &i in &units {
        let z = observed.z[i];
        let w = 1.0 / split.fold_arm_prob(i, train_fold, z);
        y.push(observed.y[i]);
        arm.push(z);
        weight.push(w);
        let k = design.strata().map_or(0, |s| s[i]);
        dof_weight.push(match &omega {
            Some(om) => om.train_weight(k, train_fold, z).unwrap_or(w),
            None => w,
        });
    }
    TrainingSet {
        x: observed.x.select_rows(&units),
        y,
        arm,
        strata: strata_all.map(|s| units.iter().map(|&i| s[i]).collect()),
        weight,
        dof_weight,
        units,
        held_out,
        design_kind: design.kind(),
    }
}

/// Builds S_[-q] with inverse-probability weights and, for strata split by
/// treatment, the degrees-of-freedom-corrected weights.
pub fn build_training_set(observed: &ObservedData, split: &SplitResult, held_out: u8) -> Result<TrainingSet> {
    if held_out != 1 && held_out != 2 {
        return Err(Error::InvalidInput(format!("fold {held_out} is not 1 or 2")));
    }
    if observed.n() != split.n() {
        return Err(Error::LengthMismatch { expected: split.n(), got: observed.n() });
    }
    let t = training_rows(observed, split, held_out);
    for arm in [1u8, 0] {
        if t.arm_count(arm) == 0 {
            return Err(Error::EmptyArm { arm });
        }
    }
    Ok(t)
}

/// All units as training rows with weights 1/P(Z_i = z), for fits on the
/// full sample (the plug-in baseline). `held_out` is 0.
pub fn build_full_training_set(observed: &ObservedData, design: &Design) -> Result<TrainingSet> {
    if observed.n() != design.n() {
        return Err(Error::LengthMismatch { expected: design.n(), got: observed.n() });
    }
    let weight: Vec<f64> = (0..observed.n()).map(|i| 1.0 / design.treatment_prob(i, observed.z[i])).collect();
    let t = TrainingSet {
        x: observed.x.clone(),
        y: observed.y.clone(),
        arm: observed.z.clone(),
        strata: design.strata().map(|s| s.to_vec()).or_else(|| observed.strata.clone()),
        dof_weight: weight.clone(),
        weight,
        units: (0..observed.n()).collect(),
        held_out: 0,
        design_kind: design.kind(),
    };
    for arm in [1u8, 0] {
        if t.arm_count(arm) == 0 {
            return Err(Error::EmptyArm { arm });
        }
    }
    Ok(t)
}

/// Per-stratum fold-by-arm counts for strata split by treatment.
#[derive(Debug, Clone)]
pub struct StratumOmega {
    /// `cells[k] = Some([[N_k[1]0, N_k[1]1], [N_k[2]0, N_k[2]1]])`.
    cells: Vec<Option<[[usize; 2]; 2]>>,
    sizes: Vec<usize>,
}

impl StratumOmega {
    /// omega_kz = sum_q N_k[q]^2 / (N_k[q]z (N_k - 1)).
    pub fn omega(&self, k: usize, arm: u8) -> Option<f64> {
        let c = self.cells.get(k)?.as_ref()?;
        let nk = self.sizes[k] as f64;
        let mut acc = 0.0;
        for fold in c {
            let size = (fold[0] + fold[1]) as f64;
            acc += size * size / (fold[arm as usize] as f64 * (nk - 1.0));
        }
        Some(acc)
    }

    /// omega_k[f]z = omega_kz (N_k - 1) / (N_k[f]z - 1), defined when the
    /// training cell has at least two units.
    pub fn train_weight(&self, k: usize, train_fold: u8, arm: u8) -> Option<f64> {
        let c = self.cells.get(k)?.as_ref()?;
        let m = c[(train_fold - 1) as usize][arm as usize];
        if m < 2 {
            return None;
        }
        Some(dof_corrected_weight(self.omega(k, arm)?, self.sizes[k], m))
    }
}

/// omega * (N_k - 1) / (m - 1) for a training cell of m units.
pub fn dof_corrected_weight(omega: f64, stratum_size: usize, train_cell: usize) -> f64 {
    omega * (stratum_size as f64 - 1.0) / (train_cell as f64 - 1.0)
}

pub fn dof_omegas(split: &SplitResult) -> Option<StratumOmega> {
    let design = &split.design;
    let sizes = design.stratum_sizes();
    let treated = design.treated_counts()?;
    let mut any = false;
    let cells = (0..sizes.len())
        .map(|k| {
            cell_of(&split.plan, k).map(|[a, b]| {
                any = true;
                let n1 = treated[k];
                let n0 = sizes[k] - n1;
                [[b, a], [n0 - b, n1 - a]]
            })
        })
        .collect();
    if !any {
        return None;
    }
    Some(StratumOmega { cells, sizes })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    /// Largest condition estimate across the solves of this fit.
    pub condition: f64,
    pub iterations: usize,
    /// Set when the estimator replaced the requested fit.
    pub fallback: Option<String>,
    /// Set for combinations the method is not established for.
    pub experimental: bool,
}

pub type CustomFn = Arc<dyn Fn(&[f64], Option<usize>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ArmModel {
    Zero,
    Constant(f64),
    /// intercept + x'beta (+ per-stratum intercept when present).
    Linear { intercept: f64, beta: Vec<f64>, stratum_intercepts: Option<Vec<Option<f64>>> },
    /// exp(intercept + x'beta).
    LogLinear { intercept: f64, beta: Vec<f64> },
    /// coef[0] + coef[1] g1(x) + coef[2] g0(x).
    Calibrated { base: Arc<FittedPredictor>, coef: [f64; 3] },
    Custom(CustomFn),
}

impl fmt::Debug for ArmModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArmModel::Zero => write!(f, "Zero"),
            ArmModel::Constant(c) => write!(f, "Constant({c})"),
            ArmModel::Linear { intercept, beta, stratum_intercepts } => f
                .debug_struct("Linear")
                .field("intercept", intercept)
                .field("beta", beta)
                .field("stratum_intercepts", stratum_intercepts)
                .finish(),
            ArmModel::LogLinear { intercept, beta } => {
                f.debug_struct("LogLinear").field("intercept", intercept).field("beta", beta).finish()
            }
            ArmModel::Calibrated { coef, .. } => write!(f, "Calibrated({coef:?})"),
            ArmModel::Custom(_) => write!(f, "Custom"),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

impl ArmModel {
    fn eval(&self, x: &[f64], stratum: Option<usize>) -> Result<f64> {
        Ok(match self {
            ArmModel::Zero => 0.0,
            ArmModel::Constant(c) => *c,
            ArmModel::Linear { intercept, beta, stratum_intercepts } => {
                let mut v = intercept + dot(beta, x);
                if let Some(alphas) = stratum_intercepts {
                    let k = stratum.ok_or_else(|| Error::InvalidInput("stratum label required".into()))?;
                    match alphas.get(k).copied().flatten() {
                        Some(a) => v += a,
                        None => return Err(Error::MissingStratum { stratum: k }),
                    }
                }
                v
            }
            ArmModel::LogLinear { intercept, beta } => libm::exp(intercept + dot(beta, x)),
            ArmModel::Calibrated { base, coef } => {
                let g1 = base.predict(1, x, stratum)?;
                let g0 = base.predict(0, x, stratum)?;
                coef[0] + coef[1] * g1 + coef[2] * g0
            }
            ArmModel::Custom(f) => f(x, stratum),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FittedPredictor {
    /// `arms[z]` predicts Y(z).
    pub arms: [ArmModel; 2],
    pub diagnostics: FitDiagnostics,
    pub id: String,
}

impl FittedPredictor {
    pub fn zero() -> Self {
        Self { arms: [ArmModel::Zero, ArmModel::Zero], diagnostics: converged(1.0), id: "zero".into() }
    }

    pub fn predict(&self, arm: u8, x: &[f64], stratum: Option<usize>) -> Result<f64> {
        let v = self.arms[arm as usize].eval(x, stratum)?;
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite prediction {v}")));
        }
        Ok(v)
    }

    /// Predictions for both arms at every row of `x`.
    pub fn predict_all(&self, x: &Matrix, strata: Option<&[usize]>) -> Result<[Vec<f64>; 2]> {
        let mut out = [Vec::with_capacity(x.rows()), Vec::with_capacity(x.rows())];
        for i in 0..x.rows() {
            let k = strata.map(|s| s[i]);
            for arm in 0..2u8 {
                out[arm as usize].push(self.predict(arm, x.row(i), k)?);
            }
        }
        Ok(out)
    }
}

fn converged(condition: f64) -> FitDiagnostics {
    FitDiagnostics { converged: true, condition, iterations: 1, fallback: None, experimental: false }
}

/// Fit contract shared by shipped and third-party learners.
pub trait Learner: Send + Sync {
    fn fit(&self, train: &TrainingSet) -> Result<FittedPredictor>;

    /// A fit that drops numerically collinear columns instead of failing.
    fn fit_relaxed(&self, train: &TrainingSet) -> Result<FittedPredictor> {
        self.fit(train)
    }

    fn id(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum PredictorSpec {
    Zero,
    Mean,
    Ols,
    WlsStrata,
    Tom,
    PairedDiff,
    Poisson {
        #[serde(default = "default_max_iter")]
        max_iter: usize,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    Calibrated { base: Box<PredictorSpec> },
}

fn default_max_iter() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-8
}

impl PredictorSpec {
    pub fn poisson() -> Self {
        PredictorSpec::Poisson { max_iter: default_max_iter(), tol: default_tol() }
    }

    fn fit_with(&self, train: &TrainingSet, policy: RankPolicy) -> Result<FittedPredictor> {
        let mut fitted = match self {
            PredictorSpec::Zero => {
                let _ = train;
                FittedPredictor::zero()
            }
            PredictorSpec::Mean => fit_mean(train)?,
            PredictorSpec::Ols => fit_ols_with(train, policy)?,
            PredictorSpec::WlsStrata => fit_wls_strata_with(train, policy)?,
            PredictorSpec::Tom => fit_tom_with(train, policy)?,
            PredictorSpec::PairedDiff => fit_paired_difference_with(train, policy)?,
            PredictorSpec::Poisson { max_iter, tol } => fit_poisson_with(train, *max_iter, *tol, policy)?,
            PredictorSpec::Calibrated { base } => {
                let g = base.fit_with(train, policy)?;
                calibrate_with(&g, train, policy)?
            }
        };
        fitted.id = self.id();
        Ok(fitted)
    }
}

impl Learner for PredictorSpec {
    fn fit(&self, train: &TrainingSet) -> Result<FittedPredictor> {
        self.fit_with(train, RankPolicy::Error)
    }

    fn fit_relaxed(&self, train: &TrainingSet) -> Result<FittedPredictor> {
        self.fit_with(train, RankPolicy::DropCollinear)
    }

    fn id(&self) -> String {
        match self {
            PredictorSpec::Zero => "zero".into(),
            PredictorSpec::Mean => "mean".into(),
            PredictorSpec::Ols => "ols".into(),
            PredictorSpec::WlsStrata => "wls-strata".into(),
            PredictorSpec::Tom => "tom".into(),
            PredictorSpec::PairedDiff => "paired-diff".into(),
            PredictorSpec::Poisson { .. } => "poisson".into(),
            PredictorSpec::Calibrated { base } => format!("calibrated({})", base.id()),
        }
    }
}

/// A learner built from a closure, for plug-in models.
pub struct FnLearner<F> {
    pub name: String,
    pub f: F,
}

impl<F> Learner for FnLearner<F>
where
    F: Fn(&TrainingSet) -> Result<FittedPredictor> + Send + Sync,
{
    fn fit(&self, train: &TrainingSet) -> Result<FittedPredictor> {
        (self.f)(train)
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

fn require_arm(train: &TrainingSet, arm: u8) -> Result<Vec<usize>> {
    let rows = train.arm_rows(arm);
    if rows.is_empty() {
        return Err(Error::EmptyArm { arm });
    }
    Ok(rows)
}

/// Weighted arm means.
pub fn fit_mean(train: &TrainingSet) -> Result<FittedPredictor> {
    let mut arms = [ArmModel::Zero, ArmModel::Zero];
    for arm in [0u8, 1] {
        let rows = require_arm(train, arm)?;
        let sw = kahan_sum(rows.iter().map(|&r| train.weight[r]));
        let swy = kahan_sum(rows.iter().map(|&r| train.weight[r] * train.y[r]));
        arms[arm as usize] = ArmModel::Constant(swy / sw);
    }
    Ok(FittedPredictor { arms, diagnostics: converged(1.0), id: "mean".into() })
}

fn lstsq_rows(
    train: &TrainingSet,
    rows: &[usize],
    weights: &[f64],
    cols: usize,
    fill: impl Fn(usize, &mut [f64]),
    policy: RankPolicy,
) -> Result<LstsqFit> {
    let mut a = Matrix::zeros(rows.len(), cols);
    let mut y = Vec::with_capacity(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for (j, &r) in rows.iter().enumerate() {
        fill(r, a.row_mut(j));
        y.push(train.y[r]);
        w.push(weights[r]);
    }
    weighted_lstsq(&a, &y, &w, policy)
}

/// Per-arm weighted least squares with intercept.
pub fn fit_ols_interacted(train: &TrainingSet) -> Result<FittedPredictor> {
    fit_ols_with(train, RankPolicy::Error)
}

fn fit_ols_with(train: &TrainingSet, policy: RankPolicy) -> Result<FittedPredictor> {
    let d = train.d();
    let mut arms = [ArmModel::Zero, ArmModel::Zero];
    let mut cond: f64 = 1.0;
    for arm in [0u8, 1] {
        let rows = require_arm(train, arm)?;
        let fit = lstsq_rows(
            train,
            &rows,
            &train.weight,
            d + 1,
            |r, out| {
                out[0] = 1.0;
                out[1..].copy_from_slice(train.x.row(r));
            },
            policy,
        )?;
        cond = cond.max(fit.condition);
        arms[arm as usize] =
            ArmModel::Linear { intercept: fit.coef[0], beta: fit.coef[1..].to_vec(), stratum_intercepts: None };
    }
    Ok(FittedPredictor { arms, diagnostics: converged(cond), id: "ols".into() })
}

fn strata_of(train: &TrainingSet) -> Vec<usize> {
    train.strata.clone().unwrap_or_else(|| vec![0; train.len()])
}

/// Per-arm fit of x'beta_z plus one intercept per stratum, weighted by the
/// degrees-of-freedom-corrected stratum weights.
pub fn fit_wls_stratum_indicators(train: &TrainingSet) -> Result<FittedPredictor> {
    fit_wls_strata_with(train, RankPolicy::Error)
}

fn fit_wls_strata_with(train: &TrainingSet, policy: RankPolicy) -> Result<FittedPredictor> {
    let d = train.d();
    let strata = strata_of(train);
    let k_total = strata.iter().max().map_or(0, |m| m + 1);
    let mut arms = [ArmModel::Zero, ArmModel::Zero];
    let mut cond: f64 = 1.0;
    for arm in [0u8, 1] {
        let rows = require_arm(train, arm)?;
        let mut present: Vec<usize> = rows.iter().map(|&r| strata[r]).collect();
        present.sort_unstable();
        present.dedup();
        let col_of = |k: usize| present.binary_search(&k).unwrap();
        let fit = lstsq_rows(
            train,
            &rows,
            &train.dof_weight,
            d + present.len(),
            |r, out| {
                out[..d].copy_from_slice(train.x.row(r));
                for v in out[d..].iter_mut() {
                    *v = 0.0;
                }
                out[d + col_of(strata[r])] = 1.0;
            },
            policy,
        )?;
        cond = cond.max(fit.condition);
        let mut alphas = vec![None; k_total];
        for (j, &k) in present.iter().enumerate() {
            alphas[k] = Some(fit.coef[d + j]);
        }
        arms[arm as usize] =
            ArmModel::Linear { intercept: 0.0, beta: fit.coef[..d].to_vec(), stratum_intercepts: Some(alphas) };
    }
    Ok(FittedPredictor { arms, diagnostics: converged(cond), id: "wls-strata".into() })
}

/// Shared slope across arms with one intercept per (stratum, arm).
pub fn fit_tom(train: &TrainingSet) -> Result<FittedPredictor> {
    fit_tom_with(train, RankPolicy::Error)
}

fn fit_tom_with(train: &TrainingSet, policy: RankPolicy) -> Result<FittedPredictor> {
    let d = train.d();
    require_arm(train, 0)?;
    require_arm(train, 1)?;
    let strata = strata_of(train);
    let k_total = strata.iter().max().map_or(0, |m| m + 1);
    let mut cells: Vec<(usize, u8)> = (0..train.len()).map(|r| (strata[r], train.arm[r])).collect();
    cells.sort_unstable();
    cells.dedup();
    let rows: Vec<usize> = (0..train.len()).collect();
    let fit = lstsq_rows(
        train,
        &rows,
        &train.dof_weight,
        d + cells.len(),
        |r, out| {
            out[..d].copy_from_slice(train.x.row(r));
            for v in out[d..].iter_mut() {
                *v = 0.0;
            }
            let j = cells.binary_search(&(strata[r], train.arm[r])).unwrap();
            out[d + j] = 1.0;
        },
        policy,
    )?;
    let beta = fit.coef[..d].to_vec();
    let mut arms = [ArmModel::Zero, ArmModel::Zero];
    for arm in [0u8, 1] {
        let mut alphas = vec![None; k_total];
        for (j, &(k, a)) in cells.iter().enumerate() {
            if a == arm {
                alphas[k] = Some(fit.coef[d + j]);
            }
        }
        arms[arm as usize] = ArmModel::Linear { intercept: 0.0, beta: beta.clone(), stratum_intercepts: Some(alphas) };
    }
    Ok(FittedPredictor { arms, diagnostics: converged(fit.condition), id: "tom".into() })
}

/// Regression of the within-pair treated-minus-control outcome difference
/// on the covariate difference, without intercept; both arms predict x'beta.
/// Pairs are read from the training strata; incomplete pairs are skipped.
pub fn fit_paired_difference(train: &TrainingSet) -> Result<FittedPredictor> {
    fit_paired_difference_with(train, RankPolicy::Error)
}

fn fit_paired_difference_with(train: &TrainingSet, policy: RankPolicy) -> Result<FittedPredictor> {
    let d = train.d();
    let pairs = train
        .strata
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("paired-difference fit needs pair labels".into()))?;
    let k_total = pairs.iter().max().map_or(0, |m| m + 1);
    let mut slot: Vec<[Option<usize>; 2]> = vec![[None, None]; k_total];
    for r in 0..train.len() {
        let s = &mut slot[pairs[r]][train.arm[r] as usize];
        if s.is_some() {
            return Err(Error::InvalidInput(format!("pair {} has two units in one arm", pairs[r])));
        }
        *s = Some(r);
    }
    let complete: Vec<(usize, usize)> =
        slot.iter().filter_map(|s| match s { [Some(c), Some(t)] => Some((*t, *c)), _ => None }).collect();
    if complete.is_empty() {
        return Err(Error::EmptyArm { arm: if train.arm_count(1) == 0 { 1 } else { 0 } });
    }
    let mut dx = Matrix::zeros(complete.len(), d);
    let mut dy = Vec::with_capacity(complete.len());
    for (j, &(t, c)) in complete.iter().enumerate() {
        let row = dx.row_mut(j);
        for (m, v) in row.iter_mut().enumerate() {
            *v = train.x.get(t, m) - train.x.get(c, m);
        }
        dy.push(train.y[t] - train.y[c]);
    }
    let (beta, cond) = if dx.data().iter().all(|&v| v == 0.0) {
        (vec![0.0; d], 1.0)
    } else {
        let fit = weighted_lstsq(&dx, &dy, &vec![1.0; complete.len()], policy)?;
        (fit.coef, fit.condition)
    };
    let model = ArmModel::Linear { intercept: 0.0, beta, stratum_intercepts: None };
    Ok(FittedPredictor { arms: [model.clone(), model], diagnostics: converged(cond), id: "paired-diff".into() })
}

/// Per-arm weighted Poisson regression with log link by iteratively
/// reweighted least squares.
pub fn fit_poisson_glm(train: &TrainingSet, max_iter: usize, tol: f64) -> Result<FittedPredictor> {
    fit_poisson_with(train, max_iter, tol, RankPolicy::Error)
}

const ETA_LIMIT: f64 = 700.0;
const COEF_LIMIT: f64 = 1e6;

fn poisson_deviance(y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    kahan_sum((0..y.len()).map(|i| {
        let t = if y[i] > 0.0 { y[i] * libm::log(y[i] / mu[i]) } else { 0.0 };
        2.0 * w[i] * (t - (y[i] - mu[i]))
    }))
}

fn fit_poisson_with(train: &TrainingSet, max_iter: usize, tol: f64, policy: RankPolicy) -> Result<FittedPredictor> {
    let d = train.d();
    let mut arms = [ArmModel::Zero, ArmModel::Zero];
    let mut cond: f64 = 1.0;
    let mut iters = 0;
    for arm in [0u8, 1] {
        let rows = require_arm(train, arm)?;
        let y: Vec<f64> = rows.iter().map(|&r| train.y[r]).collect();
        let w: Vec<f64> = rows.iter().map(|&r| train.weight[r]).collect();
        if let Some(v) = y.iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidInput(format!("negative count {v}")));
        }
        if y.iter().all(|&v| v == 0.0) {
            return Err(Error::Separation(format!("arm {arm} has only zero outcomes")));
        }
        let mut a = Matrix::zeros(rows.len(), d + 1);
        for (j, &r) in rows.iter().enumerate() {
            let out = a.row_mut(j);
            out[0] = 1.0;
            out[1..].copy_from_slice(train.x.row(r));
        }
        let sw = kahan_sum(w.iter().copied());
        let wmean = kahan_sum(y.iter().zip(&w).map(|(a, b)| a * b)) / sw;
        let mut theta = vec![0.0; d + 1];
        theta[0] = libm::log(wmean + 1e-8);
        let linpred = |theta: &[f64]| -> Vec<f64> { (0..rows.len()).map(|j| dot(a.row(j), theta)).collect() };
        let mut eta = linpred(&theta);
        let mut mu: Vec<f64> = eta.iter().map(|&e| libm::exp(e)).collect();
        let mut dev = poisson_deviance(&y, &mu, &w);
        let mut done = false;
        for it in 0..max_iter {
            iters = iters.max(it + 1);
            let work_w: Vec<f64> = (0..rows.len()).map(|j| w[j] * mu[j]).collect();
            let work_y: Vec<f64> = (0..rows.len()).map(|j| eta[j] + (y[j] - mu[j]) / mu[j]).collect();
            let fit = weighted_lstsq(&a, &work_y, &work_w, policy)?;
            cond = cond.max(fit.condition);
            let mut step = 1.0;
            let mut cand = fit.coef.clone();
            let mut new_dev;
            let mut new_eta;
            loop {
                new_eta = linpred(&cand);
                let bad = new_eta.iter().any(|e| !e.is_finite() || *e > ETA_LIMIT);
                new_dev = if bad { f64::INFINITY } else {
                    let m: Vec<f64> = new_eta.iter().map(|&e| libm::exp(e)).collect();
                    poisson_deviance(&y, &m, &w)
                };
                if new_dev.is_finite() && new_dev <= dev * (1.0 + 1e-12) + 1e-12 {
                    break;
                }
                step *= 0.5;
                if step < 1e-6 {
                    break;
                }
                for (c, (t0, t1)) in cand.iter_mut().zip(theta.iter().zip(&fit.coef)) {
                    *c = t0 + step * (t1 - t0);
                }
            }
            if !new_dev.is_finite() {
                return Err(Error::Separation(format!("arm {arm}: linear predictor diverged")));
            }
            theta = cand;
            if libm::sqrt(theta.iter().map(|t| t * t).sum::<f64>()) > COEF_LIMIT {
                return Err(Error::Separation(format!("arm {arm}: coefficient norm above {COEF_LIMIT:e}")));
            }
            eta = new_eta;
            mu = eta.iter().map(|&e| libm::exp(e)).collect();
            let change = libm::fabs(new_dev - dev) / (libm::fabs(new_dev) + 0.1);
            dev = new_dev;
            if change < tol {
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::NoConvergence { iterations: max_iter });
        }
        arms[arm as usize] = ArmModel::LogLinear { intercept: theta[0], beta: theta[1..].to_vec() };
    }
    Ok(FittedPredictor {
        arms,
        diagnostics: FitDiagnostics { converged: true, condition: cond, iterations: iters, fallback: None, experimental: false },
        id: "poisson".into(),
    })
}

/// Second-stage per-arm regression of y on (1, g1(x), g0(x)) over the
/// training arm, weights 1/N_[-q]z. Collinear regressors are dropped; an arm
/// with fewer than 4 rows, or a failed solve, falls back to the arm mean.
pub fn calibrate_no_harm(base: &FittedPredictor, train: &TrainingSet) -> Result<FittedPredictor> {
    calibrate_with(base, train, RankPolicy::DropCollinear)
}

fn calibrate_with(base: &FittedPredictor, train: &TrainingSet, _policy: RankPolicy) -> Result<FittedPredictor> {
    let base = Arc::new(base.clone());
    let mut arms = [ArmModel::Zero, ArmModel::Zero];
    let mut cond: f64 = 1.0;
    let mut fallback = None;
    for arm in [0u8, 1] {
        let rows = require_arm(train, arm)?;
        let n_arm = rows.len() as f64;
        let mut g = Vec::with_capacity(rows.len());
        for &r in &rows {
            let k = train.stratum(r);
            g.push([base.predict(1, train.x.row(r), k)?, base.predict(0, train.x.row(r), k)?]);
        }
        let w = vec![1.0 / n_arm; train.len()];
        let solved = if rows.len() >= 4 {
            lstsq_rows(
                train,
                &rows,
                &w,
                3,
                |r, out| {
                    let j = rows.binary_search(&r).unwrap();
                    out[0] = 1.0;
                    out[1] = g[j][0];
                    out[2] = g[j][1];
                },
                RankPolicy::DropCollinear,
            )
            .ok()
        } else {
            None
        };
        arms[arm as usize] = match solved {
            Some(fit) => {
                cond = cond.max(fit.condition);
                if !fit.dropped.is_empty() {
                    fallback = Some(format!("arm {arm}: dropped calibration columns {:?}", fit.dropped));
                }
                ArmModel::Calibrated { base: base.clone(), coef: [fit.coef[0], fit.coef[1], fit.coef[2]] }
            }
            None => {
                fallback = Some(format!("arm {arm}: calibration replaced by arm mean"));
                ArmModel::Constant(kahan_sum(rows.iter().map(|&r| train.y[r])) / n_arm)
            }
        };
    }
    let experimental = matches!(train.design_kind, "sre" | "mpe");
    Ok(FittedPredictor {
        arms,
        diagnostics: FitDiagnostics { converged: true, condition: cond, iterations: 1, fallback, experimental },
        id: format!("calibrated({})", base.id),
    })
}

/// Whether the design variant makes the stratum-aware fits meaningful.
pub fn design_has_strata(design: &Design) -> bool {
    design.strata().is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitters::{assemble, SplitPlan};

    fn set(x: Vec<Vec<f64>>, y: Vec<f64>, arm: Vec<u8>, strata: Option<Vec<usize>>, w: Vec<f64>) -> TrainingSet {
        let d = x.first().map_or(0, |r| r.len());
        let n = y.len();
        TrainingSet {
            x: Matrix::from_rows(&x, d).unwrap(),
            y,
            arm,
            strata,
            dof_weight: w.clone(),
            weight: w,
            units: (0..n).collect(),
            held_out: 1,
            design_kind: "cre",
        }
    }

    fn at(p: &FittedPredictor, arm: u8, x: &[f64], k: Option<usize>) -> f64 {
        p.predict(arm, x, k).unwrap()
    }

    #[test]
    fn ols_interpolates_linear_data() {
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.7 - 1.0]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x[0]).collect();
        let arm = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let t = set(xs.clone(), y.clone(), arm.clone(), None, vec![1.0; 8]);
        let p = fit_ols_interacted(&t).unwrap();
        for i in 0..8 {
            assert!((at(&p, arm[i], &xs[i], None) - y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn ols_constant_outcome() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let t = set(xs, vec![4.0; 6], vec![1, 1, 1, 0, 0, 0], None, vec![1.0; 6]);
        let p = fit_ols_interacted(&t).unwrap();
        if let ArmModel::Linear { intercept, beta, .. } = &p.arms[1] {
            assert!((intercept - 4.0).abs() < 1e-10);
            assert!(beta.iter().all(|b| b.abs() < 1e-10));
        } else {
            panic!()
        }
    }

    #[test]
    fn ols_weighted_three_points() {
        // arm 1: x = (0,1,3), y = (1,2,2), w = (1,2,1) -> normal equations
        // [[4,5],[5,11]] b = [7,10]
        let xs = vec![vec![0.0], vec![1.0], vec![3.0], vec![0.0], vec![1.0]];
        let t = set(xs, vec![1.0, 2.0, 2.0, 0.0, 1.0], vec![1, 1, 1, 0, 0], None, vec![1.0, 2.0, 1.0, 1.0, 1.0]);
        let p = fit_ols_interacted(&t).unwrap();
        let (b0, b1) = (27.0 / 19.0, 5.0 / 19.0);
        assert!((at(&p, 1, &[2.0], None) - (b0 + 2.0 * b1)).abs() < 1e-12);
    }

    #[test]
    fn wls_single_stratum_equals_ols() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![libm::sin(i as f64), (i % 3) as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| libm::cos(i as f64 * 1.3) * 4.0).collect();
        let arm = vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        let w: Vec<f64> = arm.iter().map(|&a| if a == 1 { 2.5 } else { 1.5 }).collect();
        let t = set(xs.clone(), y, arm, Some(vec![0; 10]), w);
        let a = fit_ols_interacted(&t).unwrap();
        let b = fit_wls_stratum_indicators(&t).unwrap();
        for x in &xs {
            for arm in 0..2 {
                assert!((at(&a, arm, x, Some(0)) - at(&b, arm, x, Some(0))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wls_stratum_shift_interpolates_and_flags_missing() {
        let xs: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 * 0.3]).collect();
        let strata: Vec<usize> = (0..12).map(|i| i / 6).collect();
        let y: Vec<f64> = (0..12).map(|i| strata[i] as f64 * 5.0 + 2.0 * xs[i][0]).collect();
        let arm: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let t = set(xs.clone(), y.clone(), arm.clone(), Some(strata.clone()), vec![1.0; 12]);
        let p = fit_wls_stratum_indicators(&t).unwrap();
        for i in 0..12 {
            assert!((at(&p, arm[i], &xs[i], Some(strata[i])) - y[i]).abs() < 1e-10);
        }
        assert_eq!(p.predict(0, &[0.0], Some(5)).unwrap_err(), Error::MissingStratum { stratum: 5 });
    }

    #[test]
    fn tom_shared_slope() {
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let arm: Vec<u8> = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let y: Vec<f64> = (0..8).map(|i| 1.5 * i as f64 + if arm[i] == 1 { 3.0 } else { -1.0 }).collect();
        let t = set(xs.clone(), y.clone(), arm.clone(), None, vec![1.0; 8]);
        let p = fit_tom(&t).unwrap();
        for i in 0..8 {
            assert!((at(&p, arm[i], &xs[i], Some(0)) - y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn tom_identical_arms_gives_pooled_slope() {
        let xv = [0.0, 1.0, 2.0, 4.0];
        let yv = [1.0, 0.5, 3.0, 4.0];
        let mut xs = Vec::new();
        let mut y = Vec::new();
        let mut arm = Vec::new();
        for a in [1u8, 0] {
            for i in 0..4 {
                xs.push(vec![xv[i]]);
                y.push(yv[i]);
                arm.push(a);
            }
        }
        let t = set(xs, y, arm, None, vec![1.0; 8]);
        let p = fit_tom(&t).unwrap();
        // pooled slope: Sxy / Sxx with xbar = 1.75, ybar = 2.125
        let sxy: f64 = (0..4).map(|i| (xv[i] - 1.75) * (yv[i] - 2.125)).sum();
        let sxx: f64 = (0..4).map(|i| (xv[i] - 1.75) * (xv[i] - 1.75)).sum();
        if let ArmModel::Linear { beta, .. } = &p.arms[1] {
            assert!((beta[0] - sxy / sxx).abs() < 1e-12);
        } else {
            panic!()
        }
    }

    #[test]
    fn tom_two_strata_normal_equations() {
        // 4 units, 2 strata, one per (stratum, arm): intercepts absorb every
        // row so beta is unidentified; add a second unit per cell instead.
        let xs = vec![vec![0.0], vec![1.0], vec![2.0], vec![4.0], vec![1.0], vec![3.0], vec![2.0], vec![5.0]];
        let y = vec![1.0, 2.0, 2.5, 6.0, 0.0, 1.0, 3.0, 2.0];
        let arm = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let strata = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let w = vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0];
        let t = set(xs.clone(), y.clone(), arm.clone(), Some(strata.clone()), w.clone());
        let p = fit_tom(&t).unwrap();
        // Within-cell demeaning: beta = sum w (x - xbar_c)(y - ybar_c) / sum w (x - xbar_c)^2
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for c in 0..4 {
            let r = [2 * c, 2 * c + 1];
            let sw: f64 = r.iter().map(|&i| w[i]).sum();
            let xb: f64 = r.iter().map(|&i| w[i] * xs[i][0]).sum::<f64>() / sw;
            let yb: f64 = r.iter().map(|&i| w[i] * y[i]).sum::<f64>() / sw;
            for &i in &r {
                sxy += w[i] * (xs[i][0] - xb) * (y[i] - yb);
                sxx += w[i] * (xs[i][0] - xb) * (xs[i][0] - xb);
            }
        }
        if let ArmModel::Linear { beta, .. } = &p.arms[0] {
            assert!((beta[0] - sxy / sxx).abs() < 1e-12);
        } else {
            panic!()
        }
    }

    #[test]
    fn paired_difference_examples() {
        // three pairs; unit order (treated, control) per pair
        let xs = vec![vec![1.0, 0.0], vec![0.0, 0.5], vec![2.0, 1.0], vec![0.5, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]];
        let y = vec![3.0, 1.0, 2.0, 2.5, 0.0, -1.0];
        let arm = vec![1, 0, 1, 0, 0, 1];
        let pairs = vec![0, 0, 1, 1, 2, 2];
        let t = set(xs.clone(), y.clone(), arm, Some(pairs), vec![1.0; 6]);
        let p = fit_paired_difference(&t).unwrap();
        // closed form (dX'dX)^{-1} dX'dy
        let dx = [[1.0, -0.5], [1.5, 1.0], [1.0, -1.0]];
        let dy = [2.0, -0.5, -1.0];
        let mut g = [[0.0; 2]; 2];
        let mut h = [0.0; 2];
        for r in 0..3 {
            for a in 0..2 {
                h[a] += dx[r][a] * dy[r];
                for b in 0..2 {
                    g[a][b] += dx[r][a] * dx[r][b];
                }
            }
        }
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        let b0 = (g[1][1] * h[0] - g[0][1] * h[1]) / det;
        let b1 = (g[0][0] * h[1] - g[1][0] * h[0]) / det;
        assert!((at(&p, 1, &[1.0, 0.0], None) - b0).abs() < 1e-12);
        assert!((at(&p, 0, &[0.0, 1.0], None) - b1).abs() < 1e-12);
        // zero covariate differences: beta declared zero
        let same = vec![vec![1.0], vec![1.0], vec![2.0], vec![2.0]];
        let t = set(same, vec![1.0, 0.0, 3.0, 1.0], vec![1, 0, 0, 1], Some(vec![0, 0, 1, 1]), vec![1.0; 4]);
        let p = fit_paired_difference(&t).unwrap();
        assert_eq!(at(&p, 1, &[7.0], None), 0.0);
    }

    #[test]
    fn poisson_constant_and_zero() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0]).collect();
        let arm: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let t = set(xs.clone(), vec![3.0; 10], arm.clone(), None, vec![1.0; 10]);
        let p = fit_poisson_glm(&t, 100, 1e-8).unwrap();
        if let ArmModel::LogLinear { intercept, beta } = &p.arms[1] {
            assert!((intercept - libm::log(3.0)).abs() < 1e-7);
            assert!(beta[0].abs() < 1e-7);
        } else {
            panic!()
        }
        let t = set(xs, vec![0.0; 10], arm, None, vec![1.0; 10]);
        assert!(matches!(fit_poisson_glm(&t, 100, 1e-8), Err(Error::Separation(_))));
    }

    #[test]
    fn calibration_perfect_and_degenerate_base() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let arm: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..10).map(|i| 1.0 + 2.0 * i as f64).collect();
        let t = set(xs.clone(), y.clone(), arm.clone(), None, vec![1.0; 10]);
        let base = fit_ols_interacted(&t).unwrap();
        let cal = calibrate_no_harm(&base, &t).unwrap();
        for i in 0..10 {
            assert!((at(&cal, arm[i], &xs[i], None) - y[i]).abs() < 1e-9);
        }
        let constant = FittedPredictor {
            arms: [ArmModel::Constant(2.0), ArmModel::Constant(5.0)],
            diagnostics: FitDiagnostics::default(),
            id: "c".into(),
        };
        let cal = calibrate_no_harm(&constant, &t).unwrap();
        let mean1: f64 = (0..10).filter(|i| arm[*i] == 1).map(|i| y[i]).sum::<f64>() / 5.0;
        assert!((at(&cal, 1, &[100.0], None) - mean1).abs() < 1e-10);
    }

    #[test]
    fn training_set_weights_and_dof_example() {
        use crate::population::Population;
        // CRE{10,4}, by-treatment (2,3): holding out fold 1 trains on fold 2
        let d = Design::Complete { n: 10, n1: 4 };
        let plan = SplitPlan::ByTreatment { fold1_treated: 2, fold1_control: 3 };
        let z = vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let membership = vec![1, 1, 2, 2, 1, 1, 1, 2, 2, 2];
        let s = assemble(&plan, &d, membership).unwrap();
        let pop = Population::new(Matrix::zeros(10, 0), vec![1.0; 10], vec![0.0; 10], None).unwrap();
        let obs = pop.realize(&z).unwrap();
        let t = build_training_set(&obs, &s, 1).unwrap();
        assert_eq!(t.units, vec![2, 3, 7, 8, 9]);
        let w1: Vec<f64> = t.arm_rows(1).iter().map(|&r| t.weight[r]).collect();
        assert!(w1.iter().all(|&w| (w - 5.0).abs() < 1e-12));
        assert!(t.units.iter().all(|&u| s.membership[u] == 2));
        // supplement example: N_k = 6, training cell of 2, omega 0.5 -> 2.5
        assert!((dof_corrected_weight(0.5, 6, 2) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn learner_is_deterministic_and_serializable() {
        let spec = PredictorSpec::Calibrated { base: Box::new(PredictorSpec::poisson()) };
        let s = serde_json::to_string(&spec).unwrap();
        let back: PredictorSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let p: PredictorSpec = serde_json::from_str(r#"{"model":"wls-strata"}"#).unwrap();
        assert_eq!(p, PredictorSpec::WlsStrata);
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.5]).collect();
        let t = set(xs, vec![1.0, 2.0, 1.0, 4.0, 2.0, 3.0, 5.0, 1.0], vec![1, 0, 1, 0, 1, 0, 1, 0], None, vec![1.0; 8]);
        let a = PredictorSpec::Ols.fit(&t).unwrap();
        let b = PredictorSpec::Ols.fit(&t).unwrap();
        assert_eq!(at(&a, 1, &[0.3], None).to_bits(), at(&b, 1, &[0.3], None).to_bits());
    }
}
