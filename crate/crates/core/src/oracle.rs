//! Exhaustive enumeration over (assignment, split) pairs for small
//! populations, checking exact finite-sample identities.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::designs::Design;
use crate::estimators::{cross_fit_with_split, oracle_adjusted_estimate, oracle_cross_fit, Strictness};
use crate::math::{fingerprint, KahanSum};
use crate::population::Population;
use crate::predictors::{
    build_training_set, dof_omegas, ArmModel, FitDiagnostics, FittedPredictor, Learner, TrainingSet,
};
use crate::splitters::{assemble, is_optimal_plan, plan_name, SplitMechanism, SplitPlan, SplitResult};
use crate::variance::{conservativeness_gap, variance_cf};
use crate::{Error, Result};

pub const UNBIASED_TOL: f64 = 1e-10;
pub const FACTOR_TOL: f64 = 1e-12;
pub const ORDERING_TOL: f64 = 1e-10;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationReport {
    pub claim: String,
    pub fingerprint: u64,
    /// The enumerated quantity (an expectation, or a scaled variance gap).
    pub expected: f64,
    /// Exact variance of the estimator, where relevant.
    pub variance: f64,
    /// The value the claim says `expected` equals.
    pub target: f64,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Number of (assignment, split) terms enumerated.
    pub support_size: usize,
    pub prob_total: f64,
    pub notes: Vec<String>,
}

impl EnumerationReport {
    fn new(claim: &str, fp: u64, tolerance: f64) -> Self {
        Self {
            claim: claim.into(),
            fingerprint: fp,
            expected: 0.0,
            variance: 0.0,
            target: 0.0,
            max_deviation: 0.0,
            tolerance,
            pass: false,
            support_size: 0,
            prob_total: 0.0,
            notes: Vec::new(),
        }
    }

    fn finish(mut self) -> Self {
        let prob_dev = libm::fabs(self.prob_total - 1.0);
        if prob_dev > PROB_TOL {
            self.notes.push(format!("probabilities sum to 1 {prob_dev:+e}"));
        }
        self.pass = self.max_deviation <= self.tolerance && prob_dev <= PROB_TOL;
        self
    }
}

pub fn population_fingerprint(pop: &Population) -> u64 {
    let mut v = Vec::with_capacity(pop.n() * (pop.d() + 3));
    v.extend_from_slice(&pop.y1);
    v.extend_from_slice(&pop.y0);
    v.extend_from_slice(pop.x.data());
    if let Some(s) = &pop.strata {
        v.extend(s.iter().map(|&k| k as f64));
    }
    fingerprint(&v)
}

/// Calls `f(z, split, probability)` for every term of the joint support.
fn for_each_term(
    design: &Design,
    mechanism: &dyn SplitMechanism,
    cap: u64,
    mut f: impl FnMut(&[u8], &SplitResult, f64) -> Result<()>,
) -> Result<(usize, f64)> {
    let support = design.enumerate(cap)?;
    let mut count = 0usize;
    let mut total = KahanSum::new();
    for (z, pz) in &support.items {
        let splits = mechanism.split_distribution(design, z, cap)?;
        count += splits.len();
        if count as u64 > cap {
            return Err(Error::SupportTooLarge { count: count as f64, cap });
        }
        for (s, ps) in &splits {
            let p = pz * ps;
            total.add(p);
            f(z, s, p)?;
        }
    }
    Ok((count, total.value()))
}

/// E[tau_cf] over assignments and splits against the true effect.
pub fn verify_unbiasedness(
    pop: &Population,
    design: &Design,
    mechanism: &dyn SplitMechanism,
    learner: &dyn Learner,
    cap: u64,
) -> Result<EnumerationReport> {
    let mut r = EnumerationReport::new("unbiasedness", population_fingerprint(pop), UNBIASED_TOL);
    let mut m1 = KahanSum::new();
    let mut m2 = KahanSum::new();
    let (count, total) = for_each_term(design, mechanism, cap, |z, s, p| {
        let obs = pop.realize(z)?;
        let est = cross_fit_with_split(&obs, s, learner, Strictness::Lenient)?;
        m1.add(p * est.tau_hat);
        m2.add(p * est.tau_hat * est.tau_hat);
        Ok(())
    })?;
    r.expected = m1.value();
    r.variance = m2.value() - r.expected * r.expected;
    r.target = pop.ate_true();
    r.max_deviation = libm::fabs(r.expected - r.target);
    r.support_size = count;
    r.prob_total = total;
    r.notes.push(format!("{} / {}", mechanism.name(), learner.id()));
    Ok(r.finish())
}

fn fold_key(z: &[u8], units: &[usize]) -> Vec<u8> {
    units.iter().map(|&i| z[i]).collect()
}

/// Checks that given each split the two folds' assignments are independent
/// and follow the reported fold designs.
pub fn verify_conditional_independence(design: &Design, plan: &SplitPlan, cap: u64) -> Result<EnumerationReport> {
    let fp = fingerprint(&[design.n() as f64]);
    let mut r = EnumerationReport::new("conditional-independence", fp, FACTOR_TOL);
    // membership -> (split, list of (z, joint probability))
    let mut by_split: BTreeMap<Vec<u8>, (SplitResult, Vec<(Vec<u8>, f64)>)> = BTreeMap::new();
    let (count, total) = for_each_term(design, plan, cap, |z, s, p| {
        by_split
            .entry(s.membership.clone())
            .or_insert_with(|| (s.clone(), Vec::new()))
            .1
            .push((z.to_vec(), p));
        Ok(())
    })?;
    let mut dev: f64 = 0.0;
    for (s, terms) in by_split.values() {
        let p_split: f64 = {
            let mut k = KahanSum::new();
            terms.iter().for_each(|(_, p)| k.add(*p));
            k.value()
        };
        let mut joint: BTreeMap<(Vec<u8>, Vec<u8>), f64> = BTreeMap::new();
        let mut marg: [BTreeMap<Vec<u8>, f64>; 2] = [BTreeMap::new(), BTreeMap::new()];
        for (z, p) in terms {
            let a = fold_key(z, &s.fold_units[0]);
            let b = fold_key(z, &s.fold_units[1]);
            let c = p / p_split;
            *joint.entry((a.clone(), b.clone())).or_insert(0.0) += c;
            *marg[0].entry(a).or_insert(0.0) += c;
            *marg[1].entry(b).or_insert(0.0) += c;
        }
        for (a, pa) in &marg[0] {
            for (b, pb) in &marg[1] {
                let pj = joint.get(&(a.clone(), b.clone())).copied().unwrap_or(0.0);
                dev = dev.max(libm::fabs(pj - pa * pb));
            }
        }
        for q in 0..2 {
            let fd = &s.fold_designs[q];
            let law = fd.enumerate(cap)?;
            if law.len() != marg[q].len() {
                r.notes.push(format!("fold {} support {} vs law {}", q + 1, marg[q].len(), law.len()));
                dev = f64::INFINITY;
            }
            for (a, pa) in &law.items {
                let got = marg[q].get(a).copied().unwrap_or(0.0);
                dev = dev.max(libm::fabs(got - pa));
            }
        }
    }
    r.max_deviation = dev;
    r.support_size = count;
    r.prob_total = total;
    r.notes.push(format!("{} splits", by_split.len()));
    Ok(r.finish())
}

fn oracle_moments(
    pop: &Population,
    design: &Design,
    plan: &SplitPlan,
    f_star: [&[f64]; 2],
    cap: u64,
    with_variance: bool,
) -> Result<(f64, f64, f64, usize, f64)> {
    let mut m1 = KahanSum::new();
    let mut m2 = KahanSum::new();
    let mut ev = KahanSum::new();
    let (count, total) = for_each_term(design, plan, cap, |z, s, p| {
        let obs = pop.realize(z)?;
        let est = oracle_cross_fit(z, &obs.y, s, f_star);
        m1.add(p * est.tau_hat);
        m2.add(p * est.tau_hat * est.tau_hat);
        if with_variance {
            ev.add(p * variance_cf(&est, 0.05)?.v_cf);
        }
        Ok(())
    })?;
    let mean = m1.value();
    Ok((mean, m2.value() - mean * mean, ev.value(), count, total))
}

/// Exact variance of the oracle cross-fitted estimator under each plan,
/// compared to the oracle adjusted estimator.
pub fn verify_variance_ordering(
    pop: &Population,
    design: &Design,
    plans: &[SplitPlan],
    f_star: [&[f64]; 2],
    cap: u64,
) -> Result<EnumerationReport> {
    let mut r = EnumerationReport::new("variance-ordering", population_fingerprint(pop), ORDERING_TOL);
    let support = design.enumerate(cap)?;
    let mut m1 = KahanSum::new();
    let mut m2 = KahanSum::new();
    for (z, p) in &support.items {
        let t = oracle_adjusted_estimate(pop, design, z, f_star)?;
        m1.add(p * t);
        m2.add(p * t * t);
    }
    let var_adj = m2.value() - m1.value() * m1.value();
    r.target = var_adj;
    let mut dev: f64 = 0.0;
    let mut prob_dev: f64 = 0.0;
    let mut count = 0;
    for plan in plans {
        let (_, var_cf, _, c, total) = oracle_moments(pop, design, plan, f_star, cap, false)?;
        count += c;
        prob_dev = prob_dev.max(libm::fabs(total - 1.0));
        let optimal = is_optimal_plan(plan, design)?;
        let gap = var_cf - var_adj;
        if optimal {
            dev = dev.max(libm::fabs(gap));
        } else {
            dev = dev.max(-gap);
        }
        r.notes.push(format!("{} {:?}: var {var_cf:.17e}, gap {gap:+.3e}, optimal {optimal}", plan_name(plan), plan));
        r.variance = r.variance.max(var_cf);
    }
    r.expected = var_adj;
    r.max_deviation = dev.max(0.0);
    r.support_size = count;
    r.prob_total = 1.0 + prob_dev;
    Ok(r.finish())
}

/// N {E[V_oracle-cf] - Var(tau_oracle-cf)} against the conservativeness gap,
/// for CRE with a by-treatment plan.
pub fn verify_variance_identity_cre(
    pop: &Population,
    design: &Design,
    plan: &SplitPlan,
    f_star: [&[f64]; 2],
    cap: u64,
) -> Result<EnumerationReport> {
    if !matches!(design, Design::Complete { .. }) || !matches!(plan, SplitPlan::ByTreatment { .. }) {
        return Err(Error::PlanIncompatible("identity check needs CRE with a by-treatment plan".into()));
    }
    let mut r = EnumerationReport::new("variance-identity", population_fingerprint(pop), IDENTITY_TOL);
    let (_, var, ev, count, total) = oracle_moments(pop, design, plan, f_star, cap, true)?;
    let n = pop.n() as f64;
    r.expected = n * (ev - var);
    r.variance = var;
    r.target = conservativeness_gap(pop, design, f_star)?;
    r.max_deviation = libm::fabs(r.expected - r.target);
    r.support_size = count;
    r.prob_total = total;
    Ok(r.finish())
}

/// Expectation over assignments and splits of the degrees-of-freedom
/// weighted, cell-centered training Gram matrix, against the population
/// Gram weighted by omega. Only strata whose training cells carry the
/// corrected weight (cells of two or more units) enter either side.
pub fn verify_dof_gram(pop: &Population, design: &Design, plan: &SplitPlan, cap: u64) -> Result<EnumerationReport> {
    let d = pop.d();
    let mut r = EnumerationReport::new("dof-gram", population_fingerprint(pop), UNBIASED_TOL);
    let sizes = design.stratum_sizes();
    let groups = design.stratum_units();
    // [held_out - 1][arm] -> accumulated d x d
    let mut acc = vec![vec![vec![KahanSum::new(); d * d]; 2]; 2];
    let mut target = vec![vec![vec![0.0; d * d]; 2]; 2];
    let mut qualifies = vec![[[false; 2]; 2]; sizes.len()];
    let mut seeded = false;
    let (count, total) = for_each_term(design, plan, cap, |z, s, p| {
        let obs = pop.realize(z)?;
        let om = dof_omegas(s).ok_or_else(|| Error::PlanIncompatible("plan has no by-treatment strata".into()))?;
        if !seeded {
            for (k, units) in groups.iter().enumerate() {
                for held in 1..=2u8 {
                    for arm in 0..2u8 {
                        if om.train_weight(k, 3 - held, arm).is_none() {
                            continue;
                        }
                        qualifies[k][(held - 1) as usize][arm as usize] = true;
                        let w = om.omega(k, arm).unwrap();
                        let cols: Vec<Vec<f64>> = (0..d)
                            .map(|c| units.iter().map(|&i| pop.x.get(i, c)).collect())
                            .collect();
                        let means: Vec<f64> = cols.iter().map(|c| crate::math::mean(c)).collect();
                        for &i in units {
                            for a in 0..d {
                                for b in 0..d {
                                    target[(held - 1) as usize][arm as usize][a * d + b] +=
                                        w * (pop.x.get(i, a) - means[a]) * (pop.x.get(i, b) - means[b]);
                                }
                            }
                        }
                    }
                }
            }
            seeded = true;
        }
        for held in 1..=2u8 {
            let t = build_training_set(&obs, s, held)?;
            let strata = t.strata.clone().unwrap_or_else(|| vec![0; t.len()]);
            for (k, qual) in qualifies.iter().enumerate() {
                for arm in 0..2u8 {
                    if !qual[(held - 1) as usize][arm as usize] {
                        continue;
                    }
                    let rows: Vec<usize> = (0..t.len()).filter(|&j| strata[j] == k && t.arm[j] == arm).collect();
                    let m = rows.len() as f64;
                    let means: Vec<f64> = (0..d).map(|c| rows.iter().map(|&j| t.x.get(j, c)).sum::<f64>() / m).collect();
                    for &j in &rows {
                        let w = t.dof_weight[j];
                        for a in 0..d {
                            for b in 0..d {
                                acc[(held - 1) as usize][arm as usize][a * d + b]
                                    .add(p * w * (t.x.get(j, a) - means[a]) * (t.x.get(j, b) - means[b]));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    })?;
    let mut dev: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for h in 0..2 {
        for arm in 0..2 {
            for e in 0..d * d {
                dev = dev.max(libm::fabs(acc[h][arm][e].value() - target[h][arm][e]));
                scale = scale.max(libm::fabs(target[h][arm][e]));
            }
        }
    }
    let used = qualifies.iter().flatten().flatten().filter(|&&q| q).count();
    if used == 0 {
        return Err(Error::InsufficientReplication("no training cell has two or more units".into()));
    }
    r.notes.push(format!("{used} (stratum, fold, arm) cells with corrected weights"));
    r.expected = scale;
    r.target = scale;
    r.max_deviation = dev;
    r.support_size = count;
    r.prob_total = total;
    Ok(r.finish())
}

/// A deliberately poor learner: both arms predict `scale` times the first
/// training outcome.
#[derive(Debug, Clone)]
pub struct FirstResponseLearner {
    pub scale: f64,
}

impl Default for FirstResponseLearner {
    fn default() -> Self {
        Self { scale: 1e6 }
    }
}

impl Learner for FirstResponseLearner {
    fn fit(&self, train: &TrainingSet) -> Result<FittedPredictor> {
        let c = self.scale * train.y.first().copied().unwrap_or(0.0);
        Ok(FittedPredictor {
            arms: [ArmModel::Constant(c), ArmModel::Constant(c)],
            diagnostics: FitDiagnostics { converged: true, condition: 1.0, iterations: 0, fallback: None, experimental: false },
            id: "first-response".into(),
        })
    }

    fn id(&self) -> String {
        "first-response".into()
    }
}

/// Leaky splitter: reports a by-treatment split but fills fold 1 with the
/// lowest-indexed treated and control units, so the split depends on the
/// whole assignment vector.
#[derive(Debug, Clone)]
pub struct OrderedSplitter {
    pub plan: SplitPlan,
}

impl SplitMechanism for OrderedSplitter {
    fn split_distribution(&self, design: &Design, z: &[u8], _cap: u64) -> Result<Vec<(SplitResult, f64)>> {
        let (a, b) = match &self.plan {
            SplitPlan::ByTreatment { fold1_treated, fold1_control } => (*fold1_treated, *fold1_control),
            _ => return Err(Error::PlanIncompatible("ordered splitter wraps a by-treatment plan".into())),
        };
        let mut membership = vec![2u8; z.len()];
        let (mut ta, mut tb) = (0, 0);
        for (i, &zi) in z.iter().enumerate() {
            if zi == 1 && ta < a {
                membership[i] = 1;
                ta += 1;
            } else if zi == 0 && tb < b {
                membership[i] = 1;
                tb += 1;
            }
        }
        Ok(vec![(assemble(&self.plan, design, membership)?, 1.0)])
    }

    fn name(&self) -> String {
        "ordered".into()
    }
}

/// A learner returning a fixed arm-wise function regardless of training data.
pub fn fixed_learner(f1: crate::predictors::CustomFn, f0: crate::predictors::CustomFn) -> impl Learner {
    crate::predictors::FnLearner {
        name: String::from("fixed"),
        f: move |_t: &TrainingSet| {
            Ok(FittedPredictor {
                arms: [ArmModel::Custom(f0.clone()), ArmModel::Custom(f1.clone())],
                diagnostics: FitDiagnostics::default(),
                id: "fixed".into(),
            })
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Matrix;
    use crate::predictors::PredictorSpec;

    fn pop(n: usize) -> Population {
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![libm::sin(i as f64 * 1.7), (i % 3) as f64]).collect();
        let y1 = (0..n).map(|i| 2.0 + libm::cos(i as f64) * 3.0 + i as f64 * 0.2).collect();
        let y0 = (0..n).map(|i| libm::sin(i as f64 * 0.9) + 0.5 * (i % 2) as f64).collect();
        Population::new(Matrix::from_rows(&x, 2).unwrap(), y1, y0, None).unwrap()
    }

    #[test]
    fn unbiased_for_mean_and_adversarial() {
        let p = pop(6);
        let d = Design::Complete { n: 6, n1: 3 };
        let plan = SplitPlan::ByTreatment { fold1_treated: 1, fold1_control: 2 };
        let r = verify_unbiasedness(&p, &d, &plan, &PredictorSpec::Mean, 1_000_000).unwrap();
        assert!(r.pass, "{r:?}");
        let r = verify_unbiasedness(&p, &d, &plan, &FirstResponseLearner::default(), 1_000_000).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn leaky_splitter_is_biased() {
        let p = pop(6);
        let d = Design::Complete { n: 6, n1: 3 };
        let plan = SplitPlan::ByTreatment { fold1_treated: 1, fold1_control: 2 };
        let r = verify_unbiasedness(&p, &d, &OrderedSplitter { plan }, &PredictorSpec::Mean, 1_000_000).unwrap();
        assert!(!r.pass, "{r:?}");
    }

    #[test]
    fn conditional_independence_examples() {
        let cases = [
            (Design::Bernoulli { n: 4, r1: 0.5 }, SplitPlan::Bernoulli { pi: 0.5 }),
            (Design::Complete { n: 6, n1: 3 }, SplitPlan::ByTreatment { fold1_treated: 1, fold1_control: 2 }),
            (Design::MatchedPairs { pairs: vec![0, 0, 1, 1, 2, 2, 3, 3] }, SplitPlan::ByStratum { k_fold1: 2 }),
        ];
        for (d, plan) in cases {
            let r = verify_conditional_independence(&d, &plan, 1_000_000).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn ordering_on_cre8() {
        let p = pop(8);
        let d = Design::Complete { n: 8, n1: 4 };
        let f1: Vec<f64> = (0..8).map(|i| p.x.get(i, 0)).collect();
        let f0 = vec![0.5; 8];
        let plans = [
            SplitPlan::ByTreatment { fold1_treated: 2, fold1_control: 2 },
            SplitPlan::ByTreatment { fold1_treated: 1, fold1_control: 3 },
        ];
        let r = verify_variance_ordering(&p, &d, &plans, [&f0, &f1], 1_000_000).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.variance > r.target + 1e-6);
    }

    #[test]
    fn identity_scales_quadratically() {
        let p = pop(8);
        let d = Design::Complete { n: 8, n1: 4 };
        let plan = SplitPlan::ByTreatment { fold1_treated: 2, fold1_control: 2 };
        let zero = vec![0.0; 8];
        let a = verify_variance_identity_cre(&p, &d, &plan, [&zero, &zero], 1_000_000).unwrap();
        assert!(a.pass, "{a:?}");
        let p2 = Population::new(
            p.x.clone(),
            p.y1.iter().map(|v| 2.0 * v).collect(),
            p.y0.iter().map(|v| 2.0 * v).collect(),
            None,
        )
        .unwrap();
        let b = verify_variance_identity_cre(&p2, &d, &plan, [&zero, &zero], 1_000_000).unwrap();
        assert!((b.target - 4.0 * a.target).abs() < 1e-9 && (b.expected - 4.0 * a.expected).abs() < 1e-9);
    }

    #[test]
    fn dof_gram_expectation() {
        let strata: Vec<usize> = (0..12).map(|i| usize::from(i >= 8)).collect();
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![libm::sin(i as f64 * 2.3), libm::cos(i as f64 * 0.7)]).collect();
        let p = Population::new(Matrix::from_rows(&x, 2).unwrap(), vec![1.0; 12], vec![0.0; 12], Some(strata.clone()))
            .unwrap();
        let d = Design::Stratified { strata, treated: vec![4, 2] };
        let plan = SplitPlan::ByTreatmentStratified { cells: vec![[2, 2], [1, 1]] };
        let r = verify_dof_gram(&p, &d, &plan, 1_000_000).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn cap_is_enforced() {
        let p = pop(8);
        let d = Design::Complete { n: 8, n1: 4 };
        let plan = SplitPlan::ByTreatment { fold1_treated: 2, fold1_control: 2 };
        assert!(matches!(
            verify_unbiasedness(&p, &d, &plan, &PredictorSpec::Zero, 100),
            Err(Error::SupportTooLarge { .. })
        ));
    }
}
