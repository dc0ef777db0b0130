//! Variance estimators for the cross-fitted estimator and Wald intervals.
//!
//! Each fold's variance is the design-specific estimator for a
//! Horvitz-Thompson estimate of the fold's cross-fitted residuals, under the
//! fold's conditional design.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::designs::Design;
use crate::estimators::CrossFitEstimate;
use crate::math::{centered_ss, kahan_sum, mean, normal_quantile, sample_variance};
use crate::population::Population;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub v_cf: f64,
    pub fold_v: [f64; 2],
    pub alpha: f64,
    pub ci: (f64, f64),
}

/// Variance estimate for one fold from its residuals and arms, listed in
/// the fold design's unit order.
pub fn fold_variance(design: &Design, z: &[u8], resid: &[f64]) -> Result<f64> {
    let nq = resid.len();
    if z.len() != nq || design.n() != nq {
        return Err(Error::LengthMismatch { expected: design.n(), got: nq });
    }
    let nqf = nq as f64;
    match design {
        Design::Bernoulli { r1, .. } => {
            if nq < 2 {
                return Err(Error::InsufficientReplication(format!("Bernoulli fold with {nq} unit(s)")));
            }
            let d: Vec<f64> =
                (0..nq).map(|i| if z[i] == 1 { resid[i] / r1 } else { -resid[i] / (1.0 - r1) }).collect();
            Ok(centered_ss(&d) / (nqf * nqf))
        }
        Design::Complete { .. } => {
            let mut v = 0.0;
            for arm in [0u8, 1] {
                let e: Vec<f64> = (0..nq).filter(|&i| z[i] == arm).map(|i| resid[i]).collect();
                if e.len() < 2 {
                    return Err(Error::InsufficientReplication(format!("{} unit(s) in arm {arm}", e.len())));
                }
                v += sample_variance(&e) / e.len() as f64;
            }
            Ok(v)
        }
        Design::Stratified { strata, .. } => {
            let k_total = strata.iter().max().map_or(0, |m| m + 1);
            let mut cells = vec![[Vec::new(), Vec::new()]; k_total];
            for i in 0..nq {
                cells[strata[i]][z[i] as usize].push(resid[i]);
            }
            let mut v = 0.0;
            for (k, cell) in cells.iter().enumerate() {
                let nk = (cell[0].len() + cell[1].len()) as f64;
                let mut inner = 0.0;
                for (arm, e) in cell.iter().enumerate() {
                    if e.len() < 2 {
                        return Err(Error::InsufficientReplication(format!(
                            "stratum {k} arm {arm} has {} unit(s)",
                            e.len()
                        )));
                    }
                    inner += sample_variance(e) / e.len() as f64;
                }
                v += (nk / nqf) * (nk / nqf) * inner;
            }
            Ok(v)
        }
        Design::MatchedPairs { pairs } => {
            let k_total = pairs.iter().max().map_or(0, |m| m + 1);
            if k_total < 2 {
                return Err(Error::InsufficientReplication(format!("{k_total} pair(s) in fold")));
            }
            let mut diff = vec![0.0; k_total];
            for i in 0..nq {
                diff[pairs[i]] += if z[i] == 1 { resid[i] } else { -resid[i] };
            }
            Ok(4.0 / ((nqf - 2.0) * nqf) * centered_ss(&diff))
        }
    }
}

/// V_cf = sum_q (N_q / N)^2 V_q with the interval at level 1 - alpha.
pub fn variance_cf(estimate: &CrossFitEstimate, alpha: f64) -> Result<VarianceEstimate> {
    let split = &estimate.split;
    let n = estimate.n() as f64;
    let mut fold_v = [0.0; 2];
    let mut v_cf = 0.0;
    for q in 0..2 {
        let units = &split.fold_units[q];
        let z: Vec<u8> = units.iter().map(|&i| estimate.z[i]).collect();
        let e: Vec<f64> = units.iter().map(|&i| estimate.residuals[i]).collect();
        fold_v[q] = fold_variance(&split.fold_designs[q], &z, &e)?;
        let w = units.len() as f64 / n;
        v_cf += w * w * fold_v[q];
    }
    Ok(VarianceEstimate { v_cf, fold_v, alpha, ci: confidence_interval(estimate.tau_hat, v_cf, alpha)? })
}

/// tau +/- z_{1 - alpha/2} sqrt(v).
pub fn confidence_interval(tau: f64, v: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(v >= 0.0) {
        return Err(Error::InvalidInput(format!("negative or undefined variance {v}")));
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * libm::sqrt(v);
    Ok((tau - half, tau + half))
}

/// Known excess of the variance estimator's expectation over the true
/// variance, on the N-scaled variance, for residual effects
/// tau_eps_i = (Y_i(1) - f1_i) - (Y_i(0) - f0_i).
pub fn conservativeness_gap(pop: &Population, design: &Design, f_star: [&[f64]; 2]) -> Result<f64> {
    let n = pop.n();
    if design.n() != n {
        return Err(Error::DesignMismatch(format!("design has {} units, population has {n}", design.n())));
    }
    for f in f_star {
        if f.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: f.len() });
        }
    }
    let t: Vec<f64> = (0..n).map(|i| (pop.y1[i] - f_star[1][i]) - (pop.y0[i] - f_star[0][i])).collect();
    let nf = n as f64;
    Ok(match design {
        Design::Bernoulli { .. } | Design::Complete { .. } => {
            if n < 2 {
                0.0
            } else {
                centered_ss(&t) / (nf - 1.0)
            }
        }
        Design::Stratified { .. } => {
            let groups = design.stratum_units();
            kahan_sum(groups.iter().filter(|g| g.len() > 1).map(|g| {
                let v: Vec<f64> = g.iter().map(|&i| t[i]).collect();
                let nk = g.len() as f64;
                nk / (nf * (nk - 1.0)) * centered_ss(&v)
            }))
        }
        Design::MatchedPairs { .. } => {
            if n <= 2 {
                return Ok(0.0);
            }
            let groups = design.stratum_units();
            let pair_means: Vec<f64> = groups.iter().map(|g| mean(&g.iter().map(|&i| t[i]).collect::<Vec<_>>())).collect();
            let overall = mean(&t);
            4.0 / (nf - 2.0) * kahan_sum(pair_means.iter().map(|m| (m - overall) * (m - overall)))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::oracle_cross_fit;
    use crate::math::{KahanSum, Matrix};
    use crate::splitters::{enumerate_splits, assemble, SplitPlan};
    use proptest::prelude::*;

    #[test]
    fn interval_examples() {
        assert_eq!(confidence_interval(1.5, 0.0, 0.05).unwrap(), (1.5, 1.5));
        let (lo, hi) = confidence_interval(0.0, 1.0, 0.05).unwrap();
        assert!((hi - 1.959964).abs() < 1e-5 && (lo + 1.959964).abs() < 1e-5);
        assert!((hi - 1.959963984540054).abs() < 1e-12);
    }

    #[test]
    fn zero_spread_folds() {
        let d = Design::Complete { n: 4, n1: 2 };
        assert_eq!(fold_variance(&d, &[1, 1, 0, 0], &[2.0, 2.0, -1.0, -1.0]).unwrap(), 0.0);
        let d = Design::MatchedPairs { pairs: vec![0, 0, 1, 1] };
        assert_eq!(fold_variance(&d, &[1, 0, 0, 1], &[3.0, 1.0, 0.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            fold_variance(&Design::Complete { n: 3, n1: 1 }, &[1, 0, 0], &[1.0, 2.0, 3.0]),
            Err(Error::InsufficientReplication(_))
        ));
    }

    #[test]
    fn gap_examples() {
        let pop = Population::new(Matrix::zeros(6, 0), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0.0; 6], None).unwrap();
        let z = vec![0.0; 6];
        let d = Design::Complete { n: 6, n1: 3 };
        assert!((conservativeness_gap(&pop, &d, [&z, &z]).unwrap() - 0.3).abs() < 1e-15);
        let flat = Population::new(Matrix::zeros(4, 0), vec![2.0; 4], vec![1.0; 4], None).unwrap();
        let z4 = vec![0.0; 4];
        assert_eq!(conservativeness_gap(&flat, &Design::Complete { n: 4, n1: 2 }, [&z4, &z4]).unwrap(), 0.0);
        let pairs = Population::new(Matrix::zeros(4, 0), vec![2.0, 0.0, 1.0, 1.0], vec![0.0; 4], None).unwrap();
        let mpe = Design::MatchedPairs { pairs: vec![0, 0, 1, 1] };
        assert_eq!(conservativeness_gap(&pairs, &mpe, [&z4, &z4]).unwrap(), 0.0);
    }

    #[test]
    fn identity_on_cre8() {
        let y1 = vec![3.0, 1.5, 4.0, 2.2, 0.5, 3.3, -1.0, 2.0];
        let y0 = vec![1.0, 0.2, 2.5, 2.0, -0.3, 1.1, 0.4, 0.0];
        let pop = Population::new(Matrix::zeros(8, 0), y1, y0, None).unwrap();
        let d = Design::Complete { n: 8, n1: 4 };
        let plan = SplitPlan::ByTreatment { fold1_treated: 2, fold1_control: 2 };
        let f1: Vec<f64> = (0..8).map(|i| 0.3 * i as f64).collect();
        let f0: Vec<f64> = (0..8).map(|i| 1.0 - 0.1 * i as f64).collect();
        let mut m1 = KahanSum::new();
        let mut m2 = KahanSum::new();
        let mut ev = KahanSum::new();
        for (z, pz) in d.enumerate(10_000).unwrap().items {
            let obs = pop.realize(&z).unwrap();
            for (s, ps) in enumerate_splits(&plan, &d, &z, 10_000).unwrap() {
                let est = oracle_cross_fit(&z, &obs.y, &s, [&f0, &f1]);
                let v = variance_cf(&est, 0.05).unwrap();
                m1.add(pz * ps * est.tau_hat);
                m2.add(pz * ps * est.tau_hat * est.tau_hat);
                ev.add(pz * ps * v.v_cf);
            }
        }
        let var = m2.value() - m1.value() * m1.value();
        let gap = conservativeness_gap(&pop, &d, [&f0, &f1]).unwrap();
        assert!((8.0 * (ev.value() - var) - gap).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn nonnegative_and_scale_equivariant(
            e in prop::collection::vec(-100.0f64..100.0, 8),
            s in 0.1f64..10.0
        ) {
            let d = Design::Complete { n: 8, n1: 4 };
            let plan = SplitPlan::ByTreatment { fold1_treated: 2, fold1_control: 2 };
            let z = vec![1, 1, 1, 1, 0, 0, 0, 0];
            let split = assemble(&plan, &d, vec![1, 1, 2, 2, 1, 1, 2, 2]).unwrap();
            let zero = vec![0.0; 8];
            let est = oracle_cross_fit(&z, &e, &split, [&zero, &zero]);
            let v = variance_cf(&est, 0.05).unwrap();
            prop_assert!(v.v_cf >= 0.0 && v.fold_v.iter().all(|&f| f >= 0.0));
            let w = (split.fold_units[0].len() as f64 / 8.0).powi(2) * v.fold_v[0]
                + (split.fold_units[1].len() as f64 / 8.0).powi(2) * v.fold_v[1];
            prop_assert_eq!(v.v_cf, w);
            let scaled: Vec<f64> = e.iter().map(|x| x * s).collect();
            let est2 = oracle_cross_fit(&z, &scaled, &split, [&zero, &zero]);
            let v2 = variance_cf(&est2, 0.05).unwrap();
            prop_assert!((v2.v_cf - s * s * v.v_cf).abs() <= 1e-9 * (1.0 + v2.v_cf));
            prop_assert!((v.ci.0 + v.ci.1 - 2.0 * est.tau_hat).abs() <= 1e-9 * (1.0 + v.ci.1.abs()));
        }
    }
}
