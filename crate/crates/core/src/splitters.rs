//! Conditional sample splitting: plans, the fold designs they induce,
//! positivity and optimality checks.
//!
//! Fold labels are 1 and 2. Units inside a fold keep ascending global
//! order, which is the unit order of the fold designs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::designs::Design;
use crate::math::choose;
use crate::population::canonicalize_labels;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum SplitPlan {
    /// Each unit joins fold 1 independently with probability `pi`. BRE only.
    #[serde(rename = "bernoulli")]
    Bernoulli { pi: f64 },
    /// Treated and control units split separately with fixed fold-1 counts.
    /// CRE only.
    #[serde(rename = "by-treatment")]
    ByTreatment { fold1_treated: usize, fold1_control: usize },
    /// Per-stratum `[fold1_treated, fold1_control]`. SRE only.
    #[serde(rename = "by-treatment-stratified")]
    ByTreatmentStratified { cells: Vec<[usize; 2]> },
    /// Whole strata assigned to folds, `k_fold1` of them to fold 1. SRE or MPE.
    #[serde(rename = "by-stratum")]
    ByStratum { k_fold1: usize },
    /// Per stratum either `[fold1_treated, fold1_control]` or `null` for
    /// placement by stratum; `k_fold1` of the by-stratum strata go to fold 1.
    #[serde(rename = "hybrid")]
    Hybrid { cells: Vec<Option<[usize; 2]>>, k_fold1: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    /// Fold label (1 or 2) per unit.
    pub membership: Vec<u8>,
    /// Units of each fold in ascending order.
    pub fold_units: [Vec<usize>; 2],
    /// Conditional law of each fold's assignment vector given the split.
    pub fold_designs: [Design; 2],
    /// `[P(Z_i = 0 | split), P(Z_i = 1 | split)]` per unit.
    pub cond_prob: Vec<[f64; 2]>,
    pub plan: SplitPlan,
    pub design: Design,
}

impl SplitResult {
    pub fn fold_sizes(&self) -> (usize, usize) {
        (self.fold_units[0].len(), self.fold_units[1].len())
    }

    pub fn n(&self) -> usize {
        self.membership.len()
    }

    /// Marginal P(i in fold `fold`, Z_i = `arm`) under the design and plan.
    pub fn fold_arm_prob(&self, unit: usize, fold: u8, arm: u8) -> f64 {
        fold_arm_prob(&self.plan, &self.design, unit, fold, arm)
    }

    /// The split restricted to one fold as a CSV-friendly label column.
    pub fn labels(&self) -> &[u8] {
        &self.membership
    }
}

/// Whether every conditional probability lies strictly inside (0, 1).
pub fn check_positivity(result: &SplitResult) -> bool {
    result.cond_prob.iter().all(|p| p.iter().all(|&v| v > 0.0 && v < 1.0))
}

struct Group {
    blocks: Vec<Vec<usize>>,
    to_fold1: usize,
}

fn stratum_arm_counts(design: &Design) -> (Vec<usize>, Vec<usize>) {
    let sizes = design.stratum_sizes();
    let treated = design.treated_counts().unwrap_or_else(|| vec![0; sizes.len()]);
    (sizes, treated)
}

fn check_cell(k: usize, n1: usize, n0: usize, cell: [usize; 2]) -> Result<()> {
    let [a, b] = cell;
    if !(a > 0 && a < n1 && b > 0 && b < n0) {
        return Err(Error::PlanIncompatible(format!(
            "stratum {k}: fold-1 counts ({a}, {b}) must satisfy 0 < a < {n1} and 0 < b < {n0}"
        )));
    }
    Ok(())
}

fn require_qualified(k: usize, n1: usize, n0: usize) -> Result<()> {
    if n1 < 2 {
        return Err(Error::DegenerateStratum { stratum: k, arm: 1 });
    }
    if n0 < 2 {
        return Err(Error::DegenerateStratum { stratum: k, arm: 0 });
    }
    Ok(())
}

/// Validates a plan against a design, independent of any realized z.
pub fn check_compatible(plan: &SplitPlan, design: &Design) -> Result<()> {
    match (plan, design) {
        (SplitPlan::Bernoulli { pi }, Design::Bernoulli { .. }) => {
            if !(*pi > 0.0 && *pi < 1.0) {
                return Err(Error::PlanIncompatible(format!("pi = {pi} not in (0,1)")));
            }
        }
        (SplitPlan::ByTreatment { fold1_treated, fold1_control }, Design::Complete { n, n1 }) => {
            check_cell(0, *n1, n - n1, [*fold1_treated, *fold1_control])?;
        }
        (SplitPlan::ByTreatmentStratified { cells }, Design::Stratified { .. } | Design::MatchedPairs { .. }) => {
            let (sizes, treated) = stratum_arm_counts(design);
            if cells.len() != sizes.len() {
                return Err(Error::PlanIncompatible(format!(
                    "{} cells for {} strata",
                    cells.len(),
                    sizes.len()
                )));
            }
            for k in 0..sizes.len() {
                require_qualified(k, treated[k], sizes[k] - treated[k])?;
            }
            for (k, cell) in cells.iter().enumerate() {
                check_cell(k, treated[k], sizes[k] - treated[k], *cell)?;
            }
        }
        (SplitPlan::ByStratum { k_fold1 }, Design::Stratified { .. } | Design::MatchedPairs { .. }) => {
            let k = design.n_strata();
            if !(*k_fold1 > 0 && *k_fold1 < k) {
                return Err(Error::PlanIncompatible(format!("need 0 < k_fold1 < {k}, got {k_fold1}")));
            }
        }
        (SplitPlan::Hybrid { cells, k_fold1 }, Design::Stratified { .. } | Design::MatchedPairs { .. }) => {
            let (sizes, treated) = stratum_arm_counts(design);
            if cells.len() != sizes.len() {
                return Err(Error::PlanIncompatible(format!(
                    "{} cells for {} strata",
                    cells.len(),
                    sizes.len()
                )));
            }
            let mut whole = 0;
            for (k, cell) in cells.iter().enumerate() {
                match cell {
                    Some(c) => {
                        require_qualified(k, treated[k], sizes[k] - treated[k])?;
                        check_cell(k, treated[k], sizes[k] - treated[k], *c)?;
                    }
                    None => whole += 1,
                }
            }
            let ok = if whole == cells.len() { *k_fold1 > 0 && *k_fold1 < whole } else { *k_fold1 <= whole };
            if !ok {
                return Err(Error::PlanIncompatible(format!(
                    "k_fold1 = {k_fold1} invalid for {whole} strata placed whole"
                )));
            }
        }
        _ => {
            return Err(Error::PlanIncompatible(format!(
                "plan {} cannot split a {} design",
                plan_name(plan),
                design.kind()
            )))
        }
    }
    Ok(())
}

pub fn plan_name(plan: &SplitPlan) -> &'static str {
    match plan {
        SplitPlan::Bernoulli { .. } => "bernoulli",
        SplitPlan::ByTreatment { .. } => "by-treatment",
        SplitPlan::ByTreatmentStratified { .. } => "by-treatment-stratified",
        SplitPlan::ByStratum { .. } => "by-stratum",
        SplitPlan::Hybrid { .. } => "hybrid",
    }
}

/// Per-stratum fold-1 cell, `None` when the stratum is placed whole.
pub(crate) fn cell_of(plan: &SplitPlan, k: usize) -> Option<[usize; 2]> {
    match plan {
        SplitPlan::ByTreatment { fold1_treated, fold1_control } => Some([*fold1_treated, *fold1_control]),
        SplitPlan::ByTreatmentStratified { cells } => Some(cells[k]),
        SplitPlan::Hybrid { cells, .. } => cells[k],
        _ => None,
    }
}

fn groups(plan: &SplitPlan, design: &Design, z: &[u8]) -> Vec<Group> {
    let strata = design.stratum_units();
    let mut out = Vec::new();
    let mut whole = Vec::new();
    for (k, units) in strata.into_iter().enumerate() {
        match cell_of(plan, k) {
            Some([a, b]) => {
                let t: Vec<Vec<usize>> = units.iter().filter(|&&i| z[i] == 1).map(|&i| vec![i]).collect();
                let c: Vec<Vec<usize>> = units.iter().filter(|&&i| z[i] == 0).map(|&i| vec![i]).collect();
                out.push(Group { blocks: t, to_fold1: a });
                out.push(Group { blocks: c, to_fold1: b });
            }
            None => whole.push(units),
        }
    }
    if !whole.is_empty() {
        let k1 = match plan {
            SplitPlan::ByStratum { k_fold1 } | SplitPlan::Hybrid { k_fold1, .. } => *k_fold1,
            _ => 0,
        };
        out.push(Group { blocks: whole, to_fold1: k1 });
    }
    out
}

fn check_realized(design: &Design, z: &[u8]) -> Result<()> {
    if z.len() != design.n() {
        return Err(Error::LengthMismatch { expected: design.n(), got: z.len() });
    }
    if !design.in_support(z) {
        return Err(Error::PlanIncompatible(
            "realized assignment does not match the design's treated counts".into(),
        ));
    }
    Ok(())
}

/// Builds the split result for a given membership vector.
pub fn assemble(plan: &SplitPlan, design: &Design, membership: Vec<u8>) -> Result<SplitResult> {
    let n = design.n();
    if membership.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: membership.len() });
    }
    let mut fold_units = [Vec::new(), Vec::new()];
    for (i, &m) in membership.iter().enumerate() {
        match m {
            1 | 2 => fold_units[(m - 1) as usize].push(i),
            v => return Err(Error::InvalidInput(format!("fold label {v} at unit {i}"))),
        }
    }
    let fold_designs = [fold_design(plan, design, &fold_units[0], 1), fold_design(plan, design, &fold_units[1], 2)];
    let mut cond_prob = vec![[0.0; 2]; n];
    for q in 0..2 {
        let probs = fold_designs[q].arm_probs();
        for (local, &i) in fold_units[q].iter().enumerate() {
            cond_prob[i] = probs[local];
        }
    }
    Ok(SplitResult { membership, fold_units, fold_designs, cond_prob, plan: plan.clone(), design: design.clone() })
}

fn fold_design(plan: &SplitPlan, design: &Design, units: &[usize], fold: u8) -> Design {
    match design {
        Design::Bernoulli { r1, .. } => Design::Bernoulli { n: units.len(), r1: *r1 },
        Design::Complete { n1, .. } => {
            let [a, _] = cell_of(plan, 0).unwrap_or([0, 0]);
            let t = if fold == 1 { a } else { n1 - a };
            Design::Complete { n: units.len(), n1: t }
        }
        Design::Stratified { strata, treated } => {
            let labels: Vec<usize> = units.iter().map(|&i| strata[i]).collect();
            let (local, original) = canonicalize_labels(&labels);
            let fold_treated = original
                .iter()
                .map(|&k| match cell_of(plan, k) {
                    Some([a, _]) if fold == 1 => a,
                    Some([a, _]) => treated[k] - a,
                    None => treated[k],
                })
                .collect();
            Design::Stratified { strata: local, treated: fold_treated }
        }
        Design::MatchedPairs { pairs } => {
            let labels: Vec<usize> = units.iter().map(|&i| pairs[i]).collect();
            Design::MatchedPairs { pairs: canonicalize_labels(&labels).0 }
        }
    }
}

/// Draws a split. By-treatment plans consume the realized `z`; Bernoulli
/// and by-stratum plans ignore it apart from the support check.
pub fn split<R: RngCore + ?Sized>(plan: &SplitPlan, design: &Design, z: &[u8], rng: &mut R) -> Result<SplitResult> {
    check_compatible(plan, design)?;
    check_realized(design, z)?;
    let n = design.n();
    let mut membership = vec![2u8; n];
    match plan {
        SplitPlan::Bernoulli { pi } => {
            for m in membership.iter_mut() {
                if rng.random::<f64>() < *pi {
                    *m = 1;
                }
            }
        }
        _ => {
            for g in groups(plan, design, z) {
                let mut order: Vec<usize> = (0..g.blocks.len()).collect();
                let (chosen, _) = order.partial_shuffle(rng, g.to_fold1);
                for &b in chosen.iter() {
                    for &i in &g.blocks[b] {
                        membership[i] = 1;
                    }
                }
            }
        }
    }
    assemble(plan, design, membership)
}

/// Number of splits with positive probability given z.
pub fn split_support_size(plan: &SplitPlan, design: &Design, z: &[u8]) -> f64 {
    match plan {
        SplitPlan::Bernoulli { .. } => libm::pow(2.0, design.n() as f64),
        _ => groups(plan, design, z).iter().map(|g| choose(g.blocks.len(), g.to_fold1)).product(),
    }
}

/// Every split with positive probability given z, with its conditional
/// probability.
pub fn enumerate_splits(plan: &SplitPlan, design: &Design, z: &[u8], cap: u64) -> Result<Vec<(SplitResult, f64)>> {
    check_compatible(plan, design)?;
    check_realized(design, z)?;
    let count = split_support_size(plan, design, z);
    if !(count <= cap as f64) {
        return Err(Error::SupportTooLarge { count, cap });
    }
    let n = design.n();
    let mut out = Vec::with_capacity(count as usize);
    match plan {
        SplitPlan::Bernoulli { pi } => {
            for bits in 0u64..(1u64 << n) {
                let membership: Vec<u8> = (0..n).map(|i| if (bits >> i) & 1 == 1 { 1 } else { 2 }).collect();
                let k = bits.count_ones() as f64;
                let p = libm::pow(*pi, k) * libm::pow(1.0 - *pi, n as f64 - k);
                out.push((assemble(plan, design, membership)?, p));
            }
        }
        _ => {
            let gs = groups(plan, design, z);
            let per: Vec<Vec<Vec<usize>>> =
                gs.iter().map(|g| crate::math::combinations(g.blocks.len(), g.to_fold1)).collect();
            let p = 1.0 / count;
            let mut cursor = vec![0usize; gs.len()];
            loop {
                let mut membership = vec![2u8; n];
                for (g, group) in gs.iter().enumerate() {
                    for &b in &per[g][cursor[g]] {
                        for &i in &group.blocks[b] {
                            membership[i] = 1;
                        }
                    }
                }
                out.push((assemble(plan, design, membership)?, p));
                let mut g = gs.len();
                loop {
                    if g == 0 {
                        return Ok(out);
                    }
                    g -= 1;
                    cursor[g] += 1;
                    if cursor[g] < per[g].len() {
                        break;
                    }
                    cursor[g] = 0;
                }
            }
        }
    }
    Ok(out)
}

/// A source of splits given an assignment; implemented by [`SplitPlan`] and
/// by hand-built mechanisms used as counterexamples.
pub trait SplitMechanism {
    fn split_distribution(&self, design: &Design, z: &[u8], cap: u64) -> Result<Vec<(SplitResult, f64)>>;

    fn name(&self) -> alloc::string::String;
}

impl SplitMechanism for SplitPlan {
    fn split_distribution(&self, design: &Design, z: &[u8], cap: u64) -> Result<Vec<(SplitResult, f64)>> {
        enumerate_splits(self, design, z, cap)
    }

    fn name(&self) -> alloc::string::String {
        plan_name(self).into()
    }
}

/// Marginal P(i in fold `fold`, Z_i = `arm`) for a plan under a design.
pub fn fold_arm_prob(plan: &SplitPlan, design: &Design, unit: usize, fold: u8, arm: u8) -> f64 {
    let f1 = fold == 1;
    match plan {
        SplitPlan::Bernoulli { pi } => {
            let pf = if f1 { *pi } else { 1.0 - *pi };
            pf * design.treatment_prob(unit, arm)
        }
        _ => {
            let k = design.strata().map_or(0, |s| s[unit]);
            let (sizes, treated) = stratum_arm_counts(design);
            let nk = sizes[k] as f64;
            match cell_of(plan, k) {
                Some([a, b]) => {
                    let c = match (f1, arm) {
                        (true, 1) => a,
                        (true, _) => b,
                        (false, 1) => treated[k] - a,
                        (false, _) => sizes[k] - treated[k] - b,
                    };
                    c as f64 / nk
                }
                None => {
                    let whole = match plan {
                        SplitPlan::Hybrid { cells, .. } => cells.iter().filter(|c| c.is_none()).count(),
                        _ => sizes.len(),
                    };
                    let k1 = match plan {
                        SplitPlan::ByStratum { k_fold1 } | SplitPlan::Hybrid { k_fold1, .. } => *k_fold1,
                        _ => 0,
                    };
                    let kf = if f1 { k1 } else { whole - k1 };
                    (kf as f64 / whole as f64) * design.treatment_prob(unit, arm)
                }
            }
        }
    }
}

/// Whether the plan keeps every conditional treatment probability equal to
/// the design's marginal one.
pub fn is_optimal_plan(plan: &SplitPlan, design: &Design) -> Result<bool> {
    check_compatible(plan, design)?;
    let (sizes, treated) = stratum_arm_counts(design);
    let optimal_cell = |k: usize, [a, b]: [usize; 2]| a * sizes[k] == treated[k] * (a + b);
    Ok(match plan {
        SplitPlan::Bernoulli { .. } | SplitPlan::ByStratum { .. } => true,
        SplitPlan::ByTreatment { fold1_treated, fold1_control } => optimal_cell(0, [*fold1_treated, *fold1_control]),
        SplitPlan::ByTreatmentStratified { cells } => cells.iter().enumerate().all(|(k, c)| optimal_cell(k, *c)),
        SplitPlan::Hybrid { cells, .. } => {
            cells.iter().enumerate().all(|(k, c)| c.is_none_or(|c| optimal_cell(k, c)))
        }
    })
}

/// Most balanced fold-1 cell `[a, b]` for an arm split of `n1` treated and
/// `n0` control units: exact fraction n1/(n1+n0) in both folds when
/// achievable, then most balanced fold sizes, then closest fold fractions,
/// then the larger fold 1.
pub fn balanced_cell(n1: usize, n0: usize) -> Option<[usize; 2]> {
    let n = n1 + n0;
    let target = n1 as f64 / n as f64;
    let mut best: Option<([usize; 2], bool, f64, usize, usize)> = None;
    for a in 1..n1 {
        for b in 1..n0 {
            let s1 = a + b;
            let s2 = n - s1;
            let exact = a * n == n1 * s1;
            let dev = if exact {
                0.0
            } else {
                libm::fabs(a as f64 / s1 as f64 - target) + libm::fabs((n1 - a) as f64 / s2 as f64 - target)
            };
            let imbalance = s1.abs_diff(s2);
            let better = match &best {
                None => true,
                Some((_, bexact, bdev, bimb, bs1)) => {
                    if exact != *bexact {
                        exact
                    } else if imbalance != *bimb {
                        imbalance < *bimb
                    } else if libm::fabs(dev - *bdev) > 1e-12 {
                        dev < *bdev
                    } else {
                        s1 > *bs1
                    }
                }
            };
            if better {
                best = Some(([a, b], exact, dev, imbalance, s1));
            }
        }
    }
    best.map(|b| b.0)
}

/// The default plan for a design: Bernoulli(0.5) for BRE, balanced
/// by-treatment cells for CRE and for SRE strata with at least two units per
/// arm, whole-stratum placement otherwise (ceil(K/2) to fold 1).
pub fn default_plan(design: &Design) -> Result<SplitPlan> {
    design.validate()?;
    let (sizes, treated) = stratum_arm_counts(design);
    match design {
        Design::Bernoulli { .. } => Ok(SplitPlan::Bernoulli { pi: 0.5 }),
        Design::Complete { n, n1 } => match balanced_cell(*n1, n - n1) {
            Some([a, b]) => Ok(SplitPlan::ByTreatment { fold1_treated: a, fold1_control: b }),
            None => Err(Error::PlanIncompatible("each arm needs at least 2 units to split by treatment".into())),
        },
        Design::MatchedPairs { .. } => {
            let k = sizes.len();
            if k < 2 {
                return Err(Error::PlanIncompatible("need at least 2 pairs".into()));
            }
            Ok(SplitPlan::ByStratum { k_fold1: k.div_ceil(2) })
        }
        Design::Stratified { .. } => {
            let cells: Vec<Option<[usize; 2]>> =
                (0..sizes.len()).map(|k| balanced_cell(treated[k], sizes[k] - treated[k])).collect();
            let whole = cells.iter().filter(|c| c.is_none()).count();
            if whole == 0 {
                Ok(SplitPlan::ByTreatmentStratified { cells: cells.into_iter().flatten().collect() })
            } else if whole == cells.len() {
                if whole < 2 {
                    return Err(Error::PlanIncompatible(
                        "a single stratum with fewer than 2 units in an arm cannot be split".into(),
                    ));
                }
                Ok(SplitPlan::ByStratum { k_fold1: whole.div_ceil(2) })
            } else {
                Ok(SplitPlan::Hybrid { cells, k_fold1: whole.div_ceil(2) })
            }
        }
    }
}
