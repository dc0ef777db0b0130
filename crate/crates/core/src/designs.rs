//! Randomization laws over assignment vectors: exact probabilities,
//! samplers and exhaustive support enumeration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::math::{choose, ln_choose};
use crate::{Error, Result};

pub const DEFAULT_SUPPORT_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Design {
    /// Independent Bernoulli(r1) assignment.
    #[serde(rename = "bre")]
    Bernoulli { n: usize, r1: f64 },
    /// Exactly `n1` of `n` units treated, uniformly.
    #[serde(rename = "cre")]
    Complete { n: usize, n1: usize },
    /// Independent complete randomizations within strata. `strata[i]` is the
    /// stratum index of unit i; `treated[k]` the treated count in stratum k.
    #[serde(rename = "sre")]
    Stratified { strata: Vec<usize>, treated: Vec<usize> },
    /// One treated unit per pair; `pairs[i]` is the pair index of unit i.
    #[serde(rename = "mpe")]
    MatchedPairs { pairs: Vec<usize> },
}

/// Exhaustive list of (assignment, probability) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub items: Vec<(Vec<u8>, f64)>,
}

impl Support {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_probability(&self) -> f64 {
        crate::math::kahan_sum(self.items.iter().map(|(_, p)| *p))
    }
}

fn group_units(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

impl Design {
    pub fn n(&self) -> usize {
        match self {
            Design::Bernoulli { n, .. } | Design::Complete { n, .. } => *n,
            Design::Stratified { strata, .. } => strata.len(),
            Design::MatchedPairs { pairs } => pairs.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Design::Bernoulli { .. } => "bre",
            Design::Complete { .. } => "cre",
            Design::Stratified { .. } => "sre",
            Design::MatchedPairs { .. } => "mpe",
        }
    }

    /// Checks the invariants of a user-facing design (n >= 1).
    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::InvalidDesign("design has no units".into()));
        }
        self.validate_shape()
    }

    /// Invariants that also hold for the (possibly empty) fold designs a
    /// split produces.
    pub(crate) fn validate_shape(&self) -> Result<()> {
        match self {
            Design::Bernoulli { r1, .. } => {
                if !(*r1 > 0.0 && *r1 < 1.0) {
                    return Err(Error::InvalidDesign(format!("r1 = {r1} not in (0,1)")));
                }
            }
            Design::Complete { n, n1 } => {
                if !(*n1 > 0 && n1 < n) && *n > 0 {
                    return Err(Error::InvalidDesign(format!("need 0 < n1 < n, got n1 = {n1}, n = {n}")));
                }
            }
            Design::Stratified { strata, treated } => {
                let sizes = self.stratum_sizes();
                if sizes.len() != treated.len() {
                    return Err(Error::InvalidDesign(format!(
                        "{} strata but {} treated counts",
                        sizes.len(),
                        treated.len()
                    )));
                }
                for (k, (&s, &t)) in sizes.iter().zip(treated).enumerate() {
                    if s == 0 {
                        return Err(Error::InvalidDesign(format!("stratum {k} is empty")));
                    }
                    if !(t > 0 && t < s) {
                        return Err(Error::InvalidDesign(format!(
                            "stratum {k}: need 0 < treated < size, got {t} of {s}"
                        )));
                    }
                }
                let _ = strata;
            }
            Design::MatchedPairs { .. } => {
                for (k, &s) in self.stratum_sizes().iter().enumerate() {
                    if s != 2 {
                        return Err(Error::InvalidDesign(format!("pair {k} has {s} units")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Stratum index per unit for SRE and MPE (pairs are strata).
    pub fn strata(&self) -> Option<&[usize]> {
        match self {
            Design::Stratified { strata, .. } => Some(strata),
            Design::MatchedPairs { pairs } => Some(pairs),
            _ => None,
        }
    }

    pub fn n_strata(&self) -> usize {
        self.strata().map_or(1, |s| s.iter().max().map_or(0, |m| m + 1))
    }

    /// Units per stratum; a single stratum for BRE and CRE.
    pub fn stratum_sizes(&self) -> Vec<usize> {
        match self.strata() {
            Some(s) => {
                let mut sizes = vec![0; self.n_strata()];
                for &l in s {
                    sizes[l] += 1;
                }
                sizes
            }
            None => vec![self.n()],
        }
    }

    /// Treated count per stratum (SRE reduction of MPE: one per pair).
    pub fn treated_counts(&self) -> Option<Vec<usize>> {
        match self {
            Design::Complete { n1, .. } => Some(vec![*n1]),
            Design::Stratified { treated, .. } => Some(treated.clone()),
            Design::MatchedPairs { .. } => Some(vec![1; self.n_strata()]),
            Design::Bernoulli { .. } => None,
        }
    }

    /// Units grouped by stratum index.
    pub fn stratum_units(&self) -> Vec<Vec<usize>> {
        match self.strata() {
            Some(s) => group_units(s, self.n_strata()),
            None => vec![(0..self.n()).collect()],
        }
    }

    /// Marginal P(Z_i = arm). Count-based designs divide arm counts
    /// directly, so the two arms' probabilities are each correctly rounded.
    pub fn treatment_prob(&self, unit: usize, arm: u8) -> f64 {
        let (t, size) = match self {
            Design::Bernoulli { r1, .. } => return if arm == 1 { *r1 } else { 1.0 - *r1 },
            Design::Complete { n, n1 } => (*n1, *n),
            Design::Stratified { strata, treated } => {
                let k = strata[unit];
                (treated[k], strata.iter().filter(|&&l| l == k).count())
            }
            Design::MatchedPairs { .. } => (1, 2),
        };
        let c = if arm == 1 { t } else { size - t };
        c as f64 / size as f64
    }

    /// `[P(Z_i = 0), P(Z_i = 1)]` for every unit, computed in one pass.
    pub fn arm_probs(&self) -> Vec<[f64; 2]> {
        match self {
            Design::Stratified { strata, treated } => {
                let sizes = self.stratum_sizes();
                strata
                    .iter()
                    .map(|&k| {
                        let n = sizes[k] as f64;
                        [(sizes[k] - treated[k]) as f64 / n, treated[k] as f64 / n]
                    })
                    .collect()
            }
            _ => (0..self.n()).map(|i| [self.treatment_prob(i, 0), self.treatment_prob(i, 1)]).collect(),
        }
    }

    /// Per unit `[(count, size); 2]` with P(Z_i = z) = count / size, for
    /// designs with fixed arm counts.
    pub fn arm_fractions(&self) -> Option<Vec<[(usize, usize); 2]>> {
        match self {
            Design::Bernoulli { .. } => None,
            Design::Complete { n, n1 } => Some(vec![[(n - n1, *n), (*n1, *n)]; *n]),
            Design::Stratified { strata, treated } => {
                let sizes = self.stratum_sizes();
                Some(strata.iter().map(|&k| [(sizes[k] - treated[k], sizes[k]), (treated[k], sizes[k])]).collect())
            }
            Design::MatchedPairs { pairs } => Some(vec![[(1, 2), (1, 2)]; pairs.len()]),
        }
    }

    /// P(Z_i = 1) for every unit.
    pub fn treatment_probs(&self) -> Vec<f64> {
        self.arm_probs().iter().map(|p| p[1]).collect()
    }

    /// Whether `z` satisfies the design's counting constraints.
    pub fn in_support(&self, z: &[u8]) -> bool {
        if z.len() != self.n() || z.iter().any(|&v| v > 1) {
            return false;
        }
        match self.treated_counts() {
            None => true,
            Some(treated) => {
                let mut counts = vec![0usize; treated.len()];
                match self.strata() {
                    Some(s) => {
                        for (i, &l) in s.iter().enumerate() {
                            counts[l] += z[i] as usize;
                        }
                    }
                    None => counts[0] = z.iter().map(|&v| v as usize).sum(),
                }
                counts == treated
            }
        }
    }

    /// Exact P(Z = z); zero outside the support.
    pub fn assignment_prob(&self, z: &[u8]) -> f64 {
        if !self.in_support(z) {
            return 0.0;
        }
        match self {
            Design::Bernoulli { r1, .. } => {
                let k = z.iter().filter(|&&v| v == 1).count() as i32;
                let m = z.len() as i32 - k;
                libm::pow(*r1, k as f64) * libm::pow(1.0 - *r1, m as f64)
            }
            Design::Complete { n, n1 } => 1.0 / choose(*n, *n1),
            _ => {
                let sizes = self.stratum_sizes();
                let treated = self.treated_counts().unwrap_or_default();
                let ln: f64 = sizes.iter().zip(&treated).map(|(&s, &t)| ln_choose(s, t)).sum();
                let count: f64 = sizes.iter().zip(&treated).map(|(&s, &t)| choose(s, t)).product();
                if count.is_finite() && count < 9.0e15 {
                    1.0 / count
                } else {
                    libm::exp(-ln)
                }
            }
        }
    }

    /// Number of assignment vectors with positive probability.
    pub fn support_size(&self) -> f64 {
        match self {
            Design::Bernoulli { n, .. } => libm::pow(2.0, *n as f64),
            Design::Complete { n, n1 } => choose(*n, *n1),
            _ => {
                let sizes = self.stratum_sizes();
                let treated = self.treated_counts().unwrap_or_default();
                sizes.iter().zip(&treated).map(|(&s, &t)| choose(s, t)).product()
            }
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let n = self.n();
        match self {
            Design::Bernoulli { r1, .. } => {
                (0..n).map(|_| (rng.random::<f64>() < *r1) as u8).collect()
            }
            Design::Complete { n1, .. } => {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut z = vec![0u8; n];
                let (chosen, _) = idx.partial_shuffle(rng, *n1);
                for &i in chosen.iter() {
                    z[i] = 1;
                }
                z
            }
            _ => {
                let treated = self.treated_counts().unwrap_or_default();
                let mut z = vec![0u8; n];
                for (k, mut units) in self.stratum_units().into_iter().enumerate() {
                    let (chosen, _) = units.partial_shuffle(rng, treated[k]);
                    for &i in chosen.iter() {
                        z[i] = 1;
                    }
                }
                z
            }
        }
    }

    /// Exhaustive support. Errors when its size exceeds `cap`.
    pub fn enumerate(&self, cap: u64) -> Result<Support> {
        let count = self.support_size();
        if !(count <= cap as f64) {
            return Err(Error::SupportTooLarge { count, cap });
        }
        let n = self.n();
        let mut items = Vec::with_capacity(count as usize);
        match self {
            Design::Bernoulli { .. } => {
                for bits in 0u64..(1u64 << n) {
                    let z: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
                    let p = self.assignment_prob(&z);
                    items.push((z, p));
                }
            }
            _ => {
                let treated = self.treated_counts().unwrap_or_default();
                let groups = self.stratum_units();
                let per: Vec<Vec<Vec<usize>>> = groups
                    .iter()
                    .zip(&treated)
                    .map(|(g, &t)| crate::math::combinations(g.len(), t))
                    .collect();
                let p = 1.0 / count;
                let mut cursor = vec![0usize; groups.len()];
                loop {
                    let mut z = vec![0u8; n];
                    for (k, g) in groups.iter().enumerate() {
                        for &j in &per[k][cursor[k]] {
                            z[g[j]] = 1;
                        }
                    }
                    items.push((z, p));
                    // odometer over strata, last stratum fastest
                    let mut k = groups.len();
                    loop {
                        if k == 0 {
                            return Ok(Support { items });
                        }
                        k -= 1;
                        cursor[k] += 1;
                        if cursor[k] < per[k].len() {
                            break;
                        }
                        cursor[k] = 0;
                    }
                }
            }
        }
        Ok(Support { items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sre(strata: Vec<usize>, treated: Vec<usize>) -> Design {
        Design::Stratified { strata, treated }
    }

    #[test]
    fn treatment_prob_examples() {
        assert_eq!(Design::Complete { n: 10, n1: 4 }.treatment_prob(3, 1), 0.4);
        let mpe = Design::MatchedPairs { pairs: vec![0, 0, 1, 1] };
        assert_eq!(mpe.treatment_prob(2, 1), 0.5);
        let d = sre(vec![0, 0, 0, 0, 0, 1, 1], vec![2, 1]);
        assert!((d.treatment_prob(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn assignment_prob_examples() {
        let cre = Design::Complete { n: 4, n1: 2 };
        assert!((cre.assignment_prob(&[1, 1, 0, 0]) - 1.0 / 6.0).abs() < 1e-16);
        assert_eq!(cre.assignment_prob(&[1, 1, 1, 0]), 0.0);
        let d = sre(vec![0, 0, 1, 1], vec![1, 1]);
        assert_eq!(d.assignment_prob(&[1, 0, 0, 1]), 0.25);
        assert_eq!(d.assignment_prob(&[1, 1, 0, 0]), 0.0);
    }

    #[test]
    fn enumerate_examples() {
        let s = Design::Complete { n: 4, n1: 2 }.enumerate(DEFAULT_SUPPORT_CAP).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.items.iter().all(|(_, p)| (*p - 1.0 / 6.0).abs() < 1e-16));
        let s = Design::Bernoulli { n: 2, r1: 0.5 }.enumerate(DEFAULT_SUPPORT_CAP).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.items.iter().all(|(_, p)| *p == 0.25));
        let s = Design::MatchedPairs { pairs: vec![0, 1, 0, 1] }.enumerate(DEFAULT_SUPPORT_CAP).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.items.iter().all(|(z, p)| *p == 0.25 && z[0] + z[2] == 1 && z[1] + z[3] == 1));
    }

    #[test]
    fn support_cap_enforced() {
        let d = Design::Complete { n: 40, n1: 20 };
        match d.enumerate(DEFAULT_SUPPORT_CAP) {
            Err(Error::SupportTooLarge { count, .. }) => assert_eq!(count, choose(40, 20)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation() {
        assert!(Design::Bernoulli { n: 3, r1: 1.0 }.validate().is_err());
        assert!(Design::Complete { n: 3, n1: 3 }.validate().is_err());
        assert!(sre(vec![0, 0, 1], vec![1, 1]).validate().is_err());
        assert!(Design::MatchedPairs { pairs: vec![0, 0, 0, 1] }.validate().is_err());
        assert!(Design::MatchedPairs { pairs: vec![0, 1, 1, 0] }.validate().is_ok());
    }

    #[test]
    fn sampled_constraints_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cre = Design::Complete { n: 4, n1: 2 };
        let mpe = Design::MatchedPairs { pairs: vec![0, 0, 1, 1, 2, 2] };
        for _ in 0..200 {
            assert_eq!(cre.sample(&mut rng).iter().map(|&v| v as usize).sum::<usize>(), 2);
            let z = mpe.sample(&mut rng);
            assert!(mpe.in_support(&z));
        }
    }

    #[test]
    fn bernoulli_sampling_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Design::Bernoulli { n: 100_000, r1: 0.3 };
        let mut total = 0.0;
        for _ in 0..200 {
            total += d.sample(&mut rng).iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        }
        assert!((total / 200.0 - 0.3).abs() < 0.01);
    }

    #[test]
    fn cre_sampler_goodness_of_fit() {
        // chi-square with 5 df; 20.515 is the 0.999 quantile
        let d = Design::Complete { n: 4, n1: 2 };
        let support = d.enumerate(DEFAULT_SUPPORT_CAP).unwrap();
        let mut counts = vec![0u32; support.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        for _ in 0..draws {
            let z = d.sample(&mut rng);
            let k = support.items.iter().position(|(s, _)| *s == z).unwrap();
            counts[k] += 1;
        }
        let e = draws as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 20.515, "chi2 = {chi2}");
    }

    #[test]
    fn json_round_trip() {
        let d = sre(vec![0, 1, 0, 1], vec![1, 1]);
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains("\"type\":\"sre\""));
        let back: Design = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
    }

    fn arb_design() -> impl Strategy<Value = Design> {
        prop_oneof![
            (1usize..9, 0.05f64..0.95).prop_map(|(n, r1)| Design::Bernoulli { n, r1 }),
            (2usize..10).prop_flat_map(|n| (Just(n), 1..n)).prop_map(|(n, n1)| Design::Complete { n, n1 }),
            prop::collection::vec((2usize..5).prop_flat_map(|s| (Just(s), 1..s)), 1..3).prop_map(|cells| {
                let mut strata = Vec::new();
                let mut treated = Vec::new();
                for (k, (s, t)) in cells.into_iter().enumerate() {
                    strata.extend(core::iter::repeat(k).take(s));
                    treated.push(t);
                }
                Design::Stratified { strata, treated }
            }),
            (1usize..5).prop_map(|k| Design::MatchedPairs { pairs: (0..2 * k).map(|i| i % k).collect() }),
        ]
    }

    proptest! {
        #[test]
        fn support_sums_to_one_and_marginals_match(d in arb_design()) {
            let s = d.enumerate(DEFAULT_SUPPORT_CAP).unwrap();
            prop_assert!((s.total_probability() - 1.0).abs() <= 1e-12);
            for (z, p) in &s.items {
                prop_assert!(d.in_support(z));
                prop_assert!((d.assignment_prob(z) - p).abs() <= 1e-15);
            }
            for i in 0..d.n() {
                let marginal: f64 = s.items.iter().filter(|(z, _)| z[i] == 1).map(|(_, p)| *p).sum();
                prop_assert!((marginal - d.treatment_prob(i, 1)).abs() <= 1e-12);
            }
        }
    }
}
