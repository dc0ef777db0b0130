//! Numerical kernels: dense row-major matrices, compensated sums, exact
//! binomial counts, the normal quantile and a rank-revealing least-squares
//! solver.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Condition-number threshold beyond which a least-squares problem is
/// treated as singular.
pub const CONDITION_LIMIT: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch { expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if libm::fabs(self.sum) >= libm::fabs(v) {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut acc = KahanSum::new();
    for v in it {
        acc.add(v);
    }
    acc.value()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    kahan_sum(v.iter().copied()) / v.len() as f64
}

/// Sum of squared deviations from the mean.
pub fn centered_ss(v: &[f64]) -> f64 {
    let m = mean(v);
    kahan_sum(v.iter().map(|&a| (a - m) * (a - m)))
}

/// Sample variance with divisor n - 1; zero for fewer than two values.
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    centered_ss(v) / (v.len() - 1) as f64
}

/// Binomial coefficient as a float; exact while it fits in 53 bits.
pub fn choose(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        match acc.checked_mul((n - i) as u128) {
            Some(p) => acc = p / (i as u128 + 1),
            None => return libm::exp(ln_choose(n, k)),
        }
    }
    acc as f64
}

pub fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

pub fn ln_factorial(n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    if n <= 20 {
        let mut acc = 0.0;
        for i in 2..=n {
            acc += libm::log(i as f64);
        }
        return acc;
    }
    libm::lgamma(n as f64 + 1.0)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational approximation followed by one Halley
/// step against `erfc`, accurate to about 1e-15 in the central region.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let lo = 0.02425;
    let x = if p < lo {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - lo {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = libm::sqrt(-2.0 * libm::log(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * libm::sqrt(2.0 * core::f64::consts::PI) * libm::exp(0.5 * x * x);
    x - u / (1.0 + 0.5 * x * u)
}

/// What to do when a least-squares problem is numerically rank deficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankPolicy {
    Error,
    DropCollinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstsqFit {
    pub coef: Vec<f64>,
    pub rank: usize,
    /// Ratio of the largest to smallest retained pivot of the column-scaled
    /// problem; a lower bound on the condition number.
    pub condition: f64,
    pub dropped: Vec<usize>,
}

/// Weighted least squares `min sum w_i (y_i - a_i' b)^2` through a
/// column-pivoted Householder QR of the column-equilibrated, row-scaled
/// design. Dropped columns get coefficient zero.
pub fn weighted_lstsq(a: &Matrix, y: &[f64], w: &[f64], policy: RankPolicy) -> Result<LstsqFit> {
    let (m, p) = (a.rows(), a.cols());
    if y.len() != m {
        return Err(Error::LengthMismatch { expected: m, got: y.len() });
    }
    if w.len() != m {
        return Err(Error::LengthMismatch { expected: m, got: w.len() });
    }
    if p == 0 {
        return Ok(LstsqFit { coef: Vec::new(), rank: 0, condition: 1.0, dropped: Vec::new() });
    }
    // column-major working copy of sqrt(W) A
    let mut cols: Vec<Vec<f64>> = vec![vec![0.0; m]; p];
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        if !(w[i] >= 0.0) || !w[i].is_finite() {
            return Err(Error::InvalidInput(alloc::format!("weight {} at row {}", w[i], i)));
        }
        let s = libm::sqrt(w[i]);
        let row = a.row(i);
        for j in 0..p {
            cols[j][i] = s * row[j];
        }
        rhs[i] = s * y[i];
    }
    let mut scale = vec![1.0; p];
    for j in 0..p {
        let nrm = libm::sqrt(cols[j].iter().map(|v| v * v).sum::<f64>());
        if nrm > 0.0 {
            scale[j] = nrm;
            for v in &mut cols[j] {
                *v /= nrm;
            }
        } else {
            scale[j] = 0.0;
        }
    }
    let mut perm: Vec<usize> = (0..p).collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let steps = m.min(p);
    let mut diag = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut best = k;
        for j in k + 1..p {
            if norms[j] > norms[best] {
                best = j;
            }
        }
        if best != k {
            cols.swap(k, best);
            norms.swap(k, best);
            perm.swap(k, best);
        }
        let alpha = libm::sqrt(cols[k][k..].iter().map(|v| v * v).sum::<f64>());
        if alpha == 0.0 {
            diag.push(0.0);
            continue;
        }
        let sign = if cols[k][k] >= 0.0 { 1.0 } else { -1.0 };
        let r_kk = -sign * alpha;
        let mut v: Vec<f64> = cols[k][k..].to_vec();
        v[0] -= r_kk;
        let vnorm2: f64 = v.iter().map(|a| a * a).sum();
        if vnorm2 > 0.0 {
            for j in k + 1..p {
                let dot: f64 = v.iter().zip(&cols[j][k..]).map(|(a, b)| a * b).sum();
                let f = 2.0 * dot / vnorm2;
                for (t, vi) in cols[j][k..].iter_mut().zip(&v) {
                    *t -= f * vi;
                }
            }
            let dot: f64 = v.iter().zip(&rhs[k..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            for (t, vi) in rhs[k..].iter_mut().zip(&v) {
                *t -= f * vi;
            }
        }
        cols[k][k] = r_kk;
        for t in cols[k][k + 1..].iter_mut() {
            *t = 0.0;
        }
        diag.push(libm::fabs(r_kk));
        for j in k + 1..p {
            let c = cols[j][k];
            norms[j] = (norms[j] - c * c).max(0.0);
            // refresh to avoid cancellation drift
            if norms[j] < 1e-12 {
                norms[j] = cols[j][k + 1..].iter().map(|v| v * v).sum();
            }
        }
    }
    let r11 = diag.first().copied().unwrap_or(0.0);
    let mut rank = 0;
    for &dkk in &diag {
        if r11 > 0.0 && dkk * CONDITION_LIMIT >= r11 {
            rank += 1;
        } else {
            break;
        }
    }
    let condition = if rank == 0 { f64::INFINITY } else { r11 / diag[rank - 1] };
    if rank < p && policy == RankPolicy::Error {
        let cond = if rank < diag.len() && diag[rank] > 0.0 { r11 / diag[rank] } else { f64::INFINITY };
        return Err(Error::SingularDesign { condition: cond });
    }
    let mut z = vec![0.0; p];
    for k in (0..rank).rev() {
        let mut s = rhs[k];
        for j in k + 1..rank {
            s -= cols[j][k] * z[j];
        }
        z[k] = s / cols[k][k];
    }
    let mut coef = vec![0.0; p];
    let mut dropped = Vec::new();
    for k in 0..p {
        let j = perm[k];
        if k < rank && scale[j] > 0.0 {
            coef[j] = z[k] / scale[j];
        } else {
            dropped.push(j);
        }
    }
    dropped.sort_unstable();
    Ok(LstsqFit { coef, rank, condition, dropped })
}

/// Calls `f` with every k-subset of `0..n` in lexicographic order.
pub fn for_each_combination<F: FnMut(&[usize])>(n: usize, k: usize, mut f: F) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == i - 1 + n - k {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// All k-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_combination(n, k, |c| out.push(c.to_vec()));
    out
}

/// 64-bit FNV-1a over the bit patterns of a float slice; used for fixture
/// fingerprints.
pub fn fingerprint(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
