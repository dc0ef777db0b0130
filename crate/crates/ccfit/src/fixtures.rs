//! The enumeration corpus: small populations with designs and split plans,
//! and the runner behind `ccfit verify`.

use std::sync::Arc;

use ccfit_core::math::{weighted_lstsq, RankPolicy};
use ccfit_core::oracle::{
    verify_conditional_independence, verify_dof_gram, verify_unbiasedness, verify_variance_identity_cre,
    verify_variance_ordering, EnumerationReport, FirstResponseLearner,
};
use ccfit_core::{Design, Learner, Matrix, Population, PredictorSpec, SplitPlan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const SHIPPED_CORPUS: &str = include_str!("../fixtures/corpus.json");

pub const CLAIMS: [&str; 5] =
    ["unbiasedness", "conditional-independence", "variance-ordering", "variance-identity", "dof-gram"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub name: String,
    pub x: Vec<Vec<f64>>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub design: Design,
    pub plans: Vec<SplitPlan>,
    /// Restricts the fixture to these claims; all applicable claims when absent.
    #[serde(default)]
    pub claims: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    pub fixtures: Vec<Fixture>,
}

impl Fixture {
    pub fn population(&self) -> ccfit_core::Result<Population> {
        let d = self.x.first().map_or(0, |r| r.len());
        let x = Matrix::from_rows(&self.x, d)?;
        Population::new(x, self.y1.clone(), self.y0.clone(), self.design.strata().map(|s| s.to_vec()))
    }

    fn runs(&self, claim: &str) -> bool {
        self.claims.as_ref().is_none_or(|c| c.iter().any(|s| s == claim))
    }
}

pub fn parse_corpus(text: &str) -> Result<Corpus, String> {
    let c: Corpus = serde_json::from_str(text).map_err(|e| format!("corpus: {e}"))?;
    for f in &c.fixtures {
        f.design.validate().map_err(|e| format!("fixture {}: {e}", f.name))?;
        f.population().map_err(|e| format!("fixture {}: {e}", f.name))?;
        if f.design.n() != f.y1.len() {
            return Err(format!("fixture {}: design has {} units, population {}", f.name, f.design.n(), f.y1.len()));
        }
        if f.plans.is_empty() {
            return Err(format!("fixture {}: no plans", f.name));
        }
        if let Some(bad) = f.claims.iter().flatten().find(|c| !CLAIMS.contains(&c.as_str())) {
            return Err(format!("fixture {}: unknown claim '{bad}'", f.name));
        }
    }
    Ok(c)
}

pub fn shipped_corpus() -> Corpus {
    parse_corpus(SHIPPED_CORPUS).expect("shipped corpus parses")
}

/// Per-arm population least-squares fit of y on (1, x): a fixed prediction
/// function for the oracle claims, arm-indexed.
pub fn population_ols(pop: &Population) -> [Vec<f64>; 2] {
    let (n, d) = (pop.n(), pop.d());
    let mut a = Matrix::zeros(n, d + 1);
    for i in 0..n {
        a.set(i, 0, 1.0);
        for c in 0..d {
            a.set(i, c + 1, pop.x.get(i, c));
        }
    }
    let w = vec![1.0; n];
    let fit = |y: &[f64]| -> Vec<f64> {
        let coef = weighted_lstsq(&a, y, &w, RankPolicy::DropCollinear).expect("nonempty population").coef;
        (0..n).map(|i| (0..=d).map(|c| a.get(i, c) * coef[c]).sum()).collect()
    };
    [fit(&pop.y0), fit(&pop.y1)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub fixture: String,
    pub claim: String,
    pub plan: String,
    pub predictor: String,
    pub support_size: usize,
    pub expected: f64,
    pub target: f64,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub error: Option<String>,
}

impl VerifyRow {
    fn from_report(f: &Fixture, plan: String, predictor: String, r: ccfit_core::Result<EnumerationReport>) -> Self {
        match r {
            Ok(r) => Self {
                fixture: f.name.clone(),
                claim: r.claim,
                plan,
                predictor,
                support_size: r.support_size,
                expected: r.expected,
                target: r.target,
                max_deviation: r.max_deviation,
                tolerance: r.tolerance,
                pass: r.pass,
                error: None,
            },
            Err(e) => Self {
                fixture: f.name.clone(),
                claim: String::new(),
                plan,
                predictor,
                support_size: 0,
                expected: f64::NAN,
                target: f64::NAN,
                max_deviation: f64::NAN,
                tolerance: f64::NAN,
                pass: false,
                error: Some(e.to_string()),
            },
        }
    }
}

fn plan_label(p: &SplitPlan) -> String {
    serde_json::to_string(p).expect("plan serializes")
}

fn cells_at_least_two(design: &Design, plan: &SplitPlan) -> bool {
    match (design, plan) {
        (Design::Complete { n, n1 }, SplitPlan::ByTreatment { fold1_treated: a, fold1_control: b }) => {
            let n0 = n - n1;
            *a >= 2 && *b >= 2 && n1 - a >= 2 && n0 - b >= 2
        }
        _ => false,
    }
}

enum Task<'a> {
    Unbiased(&'a Fixture, &'a SplitPlan, usize),
    Independence(&'a Fixture, &'a SplitPlan),
    Ordering(&'a Fixture),
    Identity(&'a Fixture, &'a SplitPlan),
    Gram(&'a Fixture, &'a SplitPlan),
}

/// The three learners every unbiasedness check runs: zero, arm means, and
/// an adversarial learner that scales the first training outcome by 1e6.
pub fn corpus_learners() -> Vec<Arc<dyn Learner>> {
    vec![Arc::new(PredictorSpec::Zero), Arc::new(PredictorSpec::Mean), Arc::new(FirstResponseLearner::default())]
}

/// Runs the selected claim (or all) over the corpus. Rows come back in
/// corpus order regardless of thread scheduling.
pub fn run_corpus(corpus: &Corpus, claim: Option<&str>, cap: u64) -> Vec<VerifyRow> {
    let want = |c: &str| claim.is_none_or(|w| w == c);
    let learners = corpus_learners();
    let mut tasks = Vec::new();
    for f in &corpus.fixtures {
        for p in &f.plans {
            if want("unbiasedness") && f.runs("unbiasedness") {
                tasks.extend((0..learners.len()).map(|l| Task::Unbiased(f, p, l)));
            }
            if want("conditional-independence") && f.runs("conditional-independence") {
                tasks.push(Task::Independence(f, p));
            }
            if want("variance-identity") && f.runs("variance-identity") && cells_at_least_two(&f.design, p) {
                tasks.push(Task::Identity(f, p));
            }
            if want("dof-gram") && f.claims.is_some() && f.runs("dof-gram") {
                tasks.push(Task::Gram(f, p));
            }
        }
        if want("variance-ordering") && f.runs("variance-ordering") {
            tasks.push(Task::Ordering(f));
        }
    }
    tasks
        .par_iter()
        .map(|t| match t {
            Task::Unbiased(f, p, l) => {
                let learner = &learners[*l];
                let r = f.population().and_then(|pop| verify_unbiasedness(&pop, &f.design, *p, learner.as_ref(), cap));
                VerifyRow::from_report(f, plan_label(p), learner.id(), r)
            }
            Task::Independence(f, p) => {
                VerifyRow::from_report(f, plan_label(p), String::new(), verify_conditional_independence(&f.design, p, cap))
            }
            Task::Ordering(f) => {
                let r = f.population().and_then(|pop| {
                    let fs = population_ols(&pop);
                    verify_variance_ordering(&pop, &f.design, &f.plans, [&fs[0], &fs[1]], cap)
                });
                VerifyRow::from_report(f, "all".into(), "population-ols".into(), r)
            }
            Task::Identity(f, p) => {
                let r = f.population().and_then(|pop| {
                    let fs = population_ols(&pop);
                    verify_variance_identity_cre(&pop, &f.design, p, [&fs[0], &fs[1]], cap)
                });
                VerifyRow::from_report(f, plan_label(p), "population-ols".into(), r)
            }
            Task::Gram(f, p) => {
                let r = f.population().and_then(|pop| verify_dof_gram(&pop, &f.design, p, cap));
                VerifyRow::from_report(f, plan_label(p), String::new(), r)
            }
        })
        .collect()
}

pub fn verify_csv(rows: &[VerifyRow]) -> String {
    use crate::io::fmt_num;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record([
        "fixture",
        "claim",
        "plan",
        "predictor",
        "support_size",
        "expected",
        "target",
        "max_deviation",
        "tolerance",
        "pass",
        "error",
    ])
    .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.fixture.clone(),
            r.claim.clone(),
            r.plan.clone(),
            r.predictor.clone(),
            r.support_size.to_string(),
            fmt_num(r.expected),
            fmt_num(r.target),
            fmt_num(r.max_deviation),
            fmt_num(r.tolerance),
            r.pass.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_corpus_shape() {
        let c = shipped_corpus();
        let small: Vec<&Fixture> = c.fixtures.iter().filter(|f| f.claims.is_none()).collect();
        assert!(small.len() >= 12);
        assert!(small.iter().all(|f| f.y1.len() <= 8));
        for kind in ["bre", "cre", "sre", "mpe"] {
            assert!(small.iter().any(|f| f.design.kind() == kind), "{kind}");
        }
    }

    #[test]
    fn corrupted_corpus_is_rejected() {
        assert!(parse_corpus("{\"fixtures\": [").is_err());
        let mut c = shipped_corpus();
        c.fixtures[0].y0.pop();
        assert!(parse_corpus(&serde_json::to_string(&c).unwrap()).is_err());
    }

    #[test]
    fn population_ols_is_exact_on_linear_outcomes() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![4.0]], 1).unwrap();
        let pop = Population::new(x, vec![1.0, 3.0, 5.0, 9.0], vec![2.0; 4], None).unwrap();
        let f = population_ols(&pop);
        for (a, b) in f[1].iter().zip(&pop.y1) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(f[0].iter().all(|v| (v - 2.0).abs() < 1e-12));
    }
}
