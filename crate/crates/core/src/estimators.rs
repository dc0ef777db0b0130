//! Point estimators of the average treatment effect.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::designs::Design;
use crate::math::{kahan_sum, KahanSum};
use crate::population::{ObservedData, Population};
use crate::predictors::{fit_mean, training_rows, FitDiagnostics, FittedPredictor, Learner};
use crate::splitters::{split, SplitPlan, SplitResult};
use crate::{Error, Result};

/// How [`cross_fit_with_split`] treats a fold with no units in some arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strictness {
    /// Fail with `DegenerateFold`.
    Strict,
    /// Evaluate the estimator formula as written: an empty arm contributes
    /// no residual term, and an unfittable training fold gets the zero
    /// predictor. Used by exhaustive enumeration.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitEstimate {
    pub tau_hat: f64,
    /// `fold_mu[q - 1][z]`.
    pub fold_mu: [[f64; 2]; 2],
    pub fold_tau: [f64; 2],
    /// Y_i minus the other fold's prediction for unit i's own arm.
    pub residuals: Vec<f64>,
    /// Fold of each unit (its residual comes from the other fold's fit).
    pub residual_fold: Vec<u8>,
    /// `predictions[z][i]`: the other fold's prediction of Y_i(z).
    pub predictions: [Vec<f64>; 2],
    pub z: Vec<u8>,
    /// Fit diagnostics of the predictor used on fold 1 and fold 2.
    pub diagnostics: [FitDiagnostics; 2],
    pub fallbacks: Vec<String>,
    pub split: SplitResult,
    pub predictor_id: String,
}

impl CrossFitEstimate {
    pub fn n(&self) -> usize {
        self.z.len()
    }
}

pub(crate) struct Combined {
    pub tau_hat: f64,
    pub fold_mu: [[f64; 2]; 2],
    pub fold_tau: [f64; 2],
    pub residuals: Vec<f64>,
}

fn check_observed(observed: &ObservedData, design: &Design) -> Result<()> {
    if observed.n() != design.n() {
        return Err(Error::DesignMismatch(format!("design has {} units, data has {}", design.n(), observed.n())));
    }
    if !design.in_support(&observed.z) {
        return Err(Error::DesignMismatch("assignment is outside the design's support".into()));
    }
    Ok(())
}

/// The combination step shared by the estimated and oracle versions.
/// `preds[z][i]` is the prediction of Y_i(z) used for unit i.
pub(crate) fn combine(z: &[u8], y: &[f64], split: &SplitResult, preds: &[Vec<f64>; 2]) -> Combined {
    let n = z.len();
    let mut fold_mu = [[0.0; 2]; 2];
    let mut fold_tau = [0.0; 2];
    let mut total = KahanSum::new();
    for q in 0..2 {
        let units = &split.fold_units[q];
        let nq = units.len() as f64;
        if units.is_empty() {
            continue;
        }
        let fractions = split.fold_designs[q].arm_fractions();
        for arm in 0..2usize {
            fold_mu[q][arm] = match &fractions {
                Some(fr) => fold_arm_sum_exact(z, y, units, &preds[arm], fr, arm),
                None => fold_arm_sum(z, y, units, &preds[arm], &split.cond_prob, arm),
            } / nq;
        }
        fold_tau[q] = fold_mu[q][1] - fold_mu[q][0];
        total.add(nq / n as f64 * fold_tau[q]);
    }
    let residuals = (0..n).map(|i| y[i] - preds[z[i] as usize][i]).collect();
    Combined { tau_hat: total.value(), fold_mu, fold_tau, residuals }
}

// sum_{Z=z} y / p + sum_i f (1 - 1{Z=z} / p)
fn fold_arm_sum(z: &[u8], y: &[f64], units: &[usize], f: &[f64], p: &[[f64; 2]], arm: usize) -> f64 {
    let mut s = KahanSum::new();
    for &i in units {
        let a = if z[i] as usize == arm {
            let w = 1.0 / p[i][arm];
            add_product(&mut s, y[i], w);
            1.0 - w
        } else {
            1.0
        };
        add_product(&mut s, f[i], a);
    }
    s.value()
}

// Same sum with p = count / size: numerators are accumulated per distinct
// fraction and divided once, so a constant prediction cancels exactly.
fn fold_arm_sum_exact(
    z: &[u8],
    y: &[f64],
    units: &[usize],
    f: &[f64],
    fractions: &[[(usize, usize); 2]],
    arm: usize,
) -> f64 {
    let mut groups: BTreeMap<(usize, usize), KahanSum> = BTreeMap::new();
    for (local, &i) in units.iter().enumerate() {
        let (c, size) = fractions[local][arm];
        let s = groups.entry((c, size)).or_default();
        let mut a = c as f64;
        if z[i] as usize == arm {
            add_product(s, y[i], size as f64);
            a -= size as f64;
        }
        add_product(s, f[i], a);
    }
    let mut total = KahanSum::new();
    for ((c, _), s) in groups {
        if c > 0 {
            total.add(s.value() / c as f64);
        }
    }
    total.value()
}

fn add_product(s: &mut KahanSum, a: f64, b: f64) {
    let p = a * b;
    s.add(p);
    s.add(libm::fma(a, b, -p));
}

/// Horvitz-Thompson estimator with the design's marginal probabilities.
pub fn ht_estimate(observed: &ObservedData, design: &Design) -> Result<f64> {
    check_observed(observed, design)?;
    let n = observed.n() as f64;
    Ok(kahan_sum((0..observed.n()).map(|i| {
        let y = observed.y[i];
        if observed.z[i] == 1 { y / design.treatment_prob(i, 1) } else { -y / design.treatment_prob(i, 0) }
    })) / n)
}

fn adjusted(z: &[u8], y: &[f64], design: &Design, f1: &[f64], f0: &[f64]) -> f64 {
    let n = z.len() as f64;
    kahan_sum((0..z.len()).map(|i| {
        let ipw = if z[i] == 1 {
            (y[i] - f1[i]) / design.treatment_prob(i, 1)
        } else {
            -(y[i] - f0[i]) / design.treatment_prob(i, 0)
        };
        ipw + f1[i] - f0[i]
    })) / n
}

fn unit_strata(observed: &ObservedData, design: &Design) -> Option<Vec<usize>> {
    design.strata().map(|s| s.to_vec()).or_else(|| observed.strata.clone())
}

/// Plug-in adjusted estimator with a predictor fitted on the full sample.
/// Biased in general; kept as a baseline.
pub fn adjusted_estimate(observed: &ObservedData, design: &Design, fitted: &FittedPredictor) -> Result<f64> {
    check_observed(observed, design)?;
    let strata = unit_strata(observed, design);
    let [f0, f1] = fitted.predict_all(&observed.x, strata.as_deref())?;
    Ok(adjusted(&observed.z, &observed.y, design, &f1, &f0))
}

/// Adjusted estimator with known per-unit predictions `f_star[z][i]`.
pub fn oracle_adjusted_estimate(pop: &Population, design: &Design, z: &[u8], f_star: [&[f64]; 2]) -> Result<f64> {
    let obs = pop.realize(z)?;
    check_observed(&obs, design)?;
    for f in f_star {
        if f.len() != pop.n() {
            return Err(Error::LengthMismatch { expected: pop.n(), got: f.len() });
        }
    }
    Ok(adjusted(z, &obs.y, design, f_star[1], f_star[0]))
}

/// Cross-fitted estimator with known per-unit predictions in both folds.
pub fn oracle_cross_fit(z: &[u8], y: &[f64], split: &SplitResult, f_star: [&[f64]; 2]) -> CrossFitEstimate {
    let preds = [f_star[0].to_vec(), f_star[1].to_vec()];
    let c = combine(z, y, split, &preds);
    CrossFitEstimate {
        tau_hat: c.tau_hat,
        fold_mu: c.fold_mu,
        fold_tau: c.fold_tau,
        residuals: c.residuals,
        residual_fold: split.membership.clone(),
        predictions: preds,
        z: z.to_vec(),
        diagnostics: [FitDiagnostics::default(), FitDiagnostics::default()],
        fallbacks: Vec::new(),
        split: split.clone(),
        predictor_id: "oracle".into(),
    }
}

/// Draws a split and runs the cross-fitted estimator.
pub fn cross_fit_estimate<R: RngCore + ?Sized>(
    observed: &ObservedData,
    design: &Design,
    plan: &SplitPlan,
    learner: &dyn Learner,
    rng: &mut R,
) -> Result<CrossFitEstimate> {
    check_observed(observed, design)?;
    let s = split(plan, design, &observed.z, rng)?;
    cross_fit_with_split(observed, &s, learner, Strictness::Strict)
}

fn fit_chain(learner: &dyn Learner, train: &crate::predictors::TrainingSet, notes: &mut Vec<String>) -> FittedPredictor {
    match learner.fit(train) {
        Ok(p) => return p,
        Err(e) => notes.push(format!("fold {}: {} failed ({e}); dropping collinear columns", train.held_out, learner.id())),
    }
    if let Ok(mut p) = learner.fit_relaxed(train) {
        p.diagnostics.fallback = Some("relaxed".into());
        return p;
    }
    notes.push(format!("fold {}: falling back to arm means", train.held_out));
    match fit_mean(train) {
        Ok(mut p) => {
            p.diagnostics.fallback = Some("mean".into());
            p
        }
        Err(_) => {
            notes.push(format!("fold {}: empty training arm, using zero predictor", train.held_out));
            let mut p = FittedPredictor::zero();
            p.diagnostics.fallback = Some("zero".into());
            p
        }
    }
}

fn fold_predictions(
    p: &FittedPredictor,
    observed: &ObservedData,
    units: &[usize],
    strata: Option<&[usize]>,
) -> Result<[Vec<f64>; 2]> {
    let mut out = [Vec::with_capacity(units.len()), Vec::with_capacity(units.len())];
    for &i in units {
        let k = strata.map(|s| s[i]);
        for arm in 0..2u8 {
            out[arm as usize].push(p.predict(arm, observed.x.row(i), k)?);
        }
    }
    Ok(out)
}

/// Runs the fit/predict/combine steps for a given split.
pub fn cross_fit_with_split(
    observed: &ObservedData,
    split: &SplitResult,
    learner: &dyn Learner,
    strictness: Strictness,
) -> Result<CrossFitEstimate> {
    check_observed(observed, &split.design)?;
    let n = observed.n();
    if strictness == Strictness::Strict {
        for q in 0..2u8 {
            for arm in [1u8, 0] {
                if !split.fold_units[q as usize].iter().any(|&i| observed.z[i] == arm) {
                    return Err(Error::DegenerateFold { fold: q + 1, arm });
                }
            }
        }
    }
    let strata = unit_strata(observed, &split.design);
    let mut preds = [vec![0.0; n], vec![0.0; n]];
    let mut notes = Vec::new();
    let mut diagnostics = [FitDiagnostics::default(), FitDiagnostics::default()];
    for q in 1..=2u8 {
        let units = &split.fold_units[(q - 1) as usize];
        if units.is_empty() {
            continue;
        }
        let train = training_rows(observed, split, q);
        let mut fitted = fit_chain(learner, &train, &mut notes);
        let local = match fold_predictions(&fitted, observed, units, strata.as_deref()) {
            Ok(v) => v,
            Err(e) => {
                notes.push(format!("fold {q}: prediction failed ({e}); falling back to arm means"));
                fitted = fit_mean(&train).unwrap_or_else(|_| FittedPredictor::zero());
                fitted.diagnostics.fallback = Some("mean".into());
                fold_predictions(&fitted, observed, units, strata.as_deref())?
            }
        };
        for (j, &i) in units.iter().enumerate() {
            preds[0][i] = local[0][j];
            preds[1][i] = local[1][j];
        }
        diagnostics[(q - 1) as usize] = fitted.diagnostics.clone();
    }
    let c = combine(&observed.z, &observed.y, split, &preds);
    Ok(CrossFitEstimate {
        tau_hat: c.tau_hat,
        fold_mu: c.fold_mu,
        fold_tau: c.fold_tau,
        residuals: c.residuals,
        residual_fold: split.membership.clone(),
        predictions: preds,
        z: observed.z.clone(),
        diagnostics,
        fallbacks: notes,
        split: split.clone(),
        predictor_id: learner.id(),
    })
}
