//! Fixed finite populations of potential outcomes and the observed data an
//! assignment vector reveals.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math::{kahan_sum, Matrix};
use crate::{Error, Result};

/// Potential-outcome table. Stratum labels are canonical indices `0..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub x: Matrix,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub strata: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedData {
    pub x: Matrix,
    pub z: Vec<u8>,
    pub y: Vec<f64>,
    pub strata: Option<Vec<usize>>,
}

/// Maps arbitrary labels to `0..K` in order of first appearance.
pub fn canonicalize_labels<T: PartialEq + Clone>(labels: &[T]) -> (Vec<usize>, Vec<T>) {
    let mut seen: Vec<T> = Vec::new();
    let mut out = Vec::with_capacity(labels.len());
    for l in labels {
        match seen.iter().position(|s| s == l) {
            Some(k) => out.push(k),
            None => {
                out.push(seen.len());
                seen.push(l.clone());
            }
        }
    }
    (out, seen)
}

fn check_strata(strata: &Option<Vec<usize>>, n: usize) -> Result<()> {
    if let Some(s) = strata {
        if s.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: s.len() });
        }
        let k = s.iter().copied().max().map_or(0, |m| m + 1);
        let mut present = alloc::vec![false; k];
        for &l in s {
            present[l] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::InvalidInput(format!("stratum index {missing} has no units")));
        }
    }
    Ok(())
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|a| !a.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("non-finite {name} at unit {i}"))),
        None => Ok(()),
    }
}

impl Population {
    pub fn new(x: Matrix, y1: Vec<f64>, y0: Vec<f64>, strata: Option<Vec<usize>>) -> Result<Self> {
        let n = y1.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty population".into()));
        }
        if y0.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: y0.len() });
        }
        if x.rows() != n {
            return Err(Error::LengthMismatch { expected: n, got: x.rows() });
        }
        check_finite("y1", &y1)?;
        check_finite("y0", &y0)?;
        check_finite("covariate", x.data())?;
        check_strata(&strata, n)?;
        Ok(Self { x, y1, y0, strata })
    }

    pub fn n(&self) -> usize {
        self.y1.len()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn n_strata(&self) -> usize {
        self.strata.as_ref().map_or(1, |s| s.iter().max().map_or(0, |m| m + 1))
    }

    /// Average of the unit-level effects Y(1) - Y(0).
    pub fn ate_true(&self) -> f64 {
        kahan_sum(self.y1.iter().zip(&self.y0).map(|(a, b)| a - b)) / self.n() as f64
    }

    pub fn realize(&self, z: &[u8]) -> Result<ObservedData> {
        if z.len() != self.n() {
            return Err(Error::LengthMismatch { expected: self.n(), got: z.len() });
        }
        let mut y = Vec::with_capacity(z.len());
        for (i, &zi) in z.iter().enumerate() {
            y.push(match zi {
                1 => self.y1[i],
                0 => self.y0[i],
                v => return Err(Error::InvalidInput(format!("z[{i}] = {v} is not binary"))),
            });
        }
        Ok(ObservedData { x: self.x.clone(), z: z.to_vec(), y, strata: self.strata.clone() })
    }
}

impl ObservedData {
    pub fn new(x: Matrix, z: Vec<u8>, y: Vec<f64>, strata: Option<Vec<usize>>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        if z.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: z.len() });
        }
        if x.rows() != n {
            return Err(Error::LengthMismatch { expected: n, got: x.rows() });
        }
        if let Some(i) = z.iter().position(|&v| v > 1) {
            return Err(Error::InvalidInput(format!("z[{i}] is not binary")));
        }
        check_finite("y", &y)?;
        check_finite("covariate", x.data())?;
        check_strata(&strata, n)?;
        Ok(Self { x, z, y, strata })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&v| v == 1).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn pop(y1: Vec<f64>, y0: Vec<f64>) -> Population {
        let n = y1.len();
        Population::new(Matrix::zeros(n, 0), y1, y0, None).unwrap()
    }

    #[test]
    fn ate_examples() {
        assert_eq!(pop(vec![1.0, 1.0], vec![1.0, 1.0]).ate_true(), 0.0);
        assert_eq!(pop(vec![2.0, 4.0], vec![1.0, 1.0]).ate_true(), 2.0);
    }

    #[test]
    fn realize_examples() {
        let p = pop(vec![5.0, 7.0], vec![3.0, 9.0]);
        assert_eq!(p.realize(&[1, 0]).unwrap().y, vec![5.0, 9.0]);
        assert_eq!(p.realize(&[1, 1]).unwrap().y, p.y1);
        assert_eq!(p.realize(&[0, 0]).unwrap().y, p.y0);
        assert!(matches!(p.realize(&[1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn canonical_labels_follow_first_appearance() {
        let (idx, labels) = canonicalize_labels(&["b", "a", "b", "c"]);
        assert_eq!(idx, vec![0, 1, 0, 2]);
        assert_eq!(labels, vec!["b", "a", "c"]);
    }

    #[test]
    fn rejects_gappy_strata_and_nan() {
        let x = Matrix::zeros(2, 0);
        assert!(Population::new(x.clone(), vec![1.0, 2.0], vec![0.0, 0.0], Some(vec![0, 2])).is_err());
        assert!(Population::new(x, vec![f64::NAN, 2.0], vec![0.0, 0.0], None).is_err());
    }

    proptest! {
        #[test]
        fn realize_masks_potential_outcomes(
            rows in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, 0u8..2), 1..40)
        ) {
            let y1: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let y0: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let z: Vec<u8> = rows.iter().map(|r| r.2).collect();
            let p = pop(y1.clone(), y0.clone());
            let obs = p.realize(&z).unwrap();
            for i in 0..z.len() {
                prop_assert_eq!(obs.y[i], if z[i] == 1 { y1[i] } else { y0[i] });
            }
        }

        #[test]
        fn ate_is_permutation_invariant(
            rows in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..30),
            rot in 0usize..30
        ) {
            let y1: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let y0: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let mut y1r = y1.clone();
            let mut y0r = y0.clone();
            let k = rot % y1.len();
            y1r.rotate_left(k);
            y0r.rotate_left(k);
            y1r.reverse();
            y0r.reverse();
            let a = pop(y1, y0).ate_true();
            let b = pop(y1r, y0r).ate_true();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
