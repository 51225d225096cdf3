//! Sparse dictionary learning view of pruning: the spatial baseline (keep the
//! top-`s` magnitudes), alternating minimization over a square dictionary
//! `F` and sparse coefficients `R`, the probability bound `delta` for equal
//! errors under a fixed support, and a Monte-Carlo check of both.

use nalgebra::DMatrix;
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::top_k_indices;

const RIDGE: f64 = 1e-10;

/// Slack when comparing objectives, so that rounding never reads as an increase.
const MONOTONE_TOL: f64 = 1e-12;

fn check_budget(u: &DMatrix<f64>, s: usize) -> Result<()> {
    if s > u.len() {
        return param_err(format!("sparsity budget {s} exceeds {} entries", u.len()));
    }
    Ok(())
}

fn support_of_top(values: &DMatrix<f64>, s: usize) -> Result<DMatrix<bool>> {
    let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let mut sup = DMatrix::from_element(values.nrows(), values.ncols(), false);
    for i in top_k_indices(&mags, s)? {
        sup[i] = true;
    }
    Ok(sup)
}

/// Best `s`-sparse approximation of `U` in the standard basis and its error
/// `||U - Phi*||_F`.
pub fn solve_standard(u: &DMatrix<f64>, s: usize) -> Result<(DMatrix<f64>, f64)> {
    check_budget(u, s)?;
    let sup = support_of_top(u, s)?;
    let phi = u.zip_map(&sup, |v, keep| if keep { v } else { 0.0 });
    let eps2 = (u - &phi).norm();
    Ok((phi, eps2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Support {
    /// The support of the spatial optimum.
    Fixed,
    /// Re-selected every round.
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdlSolution {
    pub f: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub eps1: f64,
    /// Objective after every accepted half-step, starting from the initial point.
    pub trace: Vec<f64>,
}

fn objective(u: &DMatrix<f64>, f: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    (u - f * r).norm()
}

/// `min_F ||U - F R||_F` through ridge-regularized normal equations.
fn f_step(u: &DMatrix<f64>, r: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = r.nrows();
    let gram = r * r.transpose() + DMatrix::identity(m, m) * RIDGE;
    let inv = gram.try_inverse()?;
    Some(u * r.transpose() * inv)
}

/// Column-wise least squares for `R` restricted to `sup`.
fn r_step(u: &DMatrix<f64>, f: &DMatrix<f64>, sup: &DMatrix<bool>) -> Option<DMatrix<f64>> {
    let mut r = DMatrix::zeros(sup.nrows(), sup.ncols());
    for j in 0..sup.ncols() {
        let rows: Vec<usize> = (0..sup.nrows()).filter(|&i| sup[(i, j)]).collect();
        if rows.is_empty() {
            continue;
        }
        let fs = f.select_columns(&rows);
        let gram = fs.transpose() * &fs + DMatrix::identity(rows.len(), rows.len()) * RIDGE;
        let rhs = fs.transpose() * u.column(j);
        let sol = gram.lu().solve(&rhs)?;
        for (k, &i) in rows.iter().enumerate() {
            r[(i, j)] = sol[k];
        }
    }
    Some(r)
}

/// Support of the `s` largest dense least-squares coefficients `F^-1 U`.
fn reselect(u: &DMatrix<f64>, f: &DMatrix<f64>, s: usize) -> Option<DMatrix<bool>> {
    let c = f.clone().lu().solve(u)?;
    support_of_top(&c, s).ok()
}

struct Alternation<'a> {
    u: &'a DMatrix<f64>,
    f: DMatrix<f64>,
    r: DMatrix<f64>,
    sup: DMatrix<bool>,
    obj: f64,
    trace: Vec<f64>,
}

impl Alternation<'_> {
    fn try_accept(&mut self, f: DMatrix<f64>, r: DMatrix<f64>, sup: Option<DMatrix<bool>>) -> bool {
        let obj = objective(self.u, &f, &r);
        if obj.is_finite() && obj <= self.obj + MONOTONE_TOL {
            self.obj = obj.min(self.obj);
            self.f = f;
            self.r = r;
            if let Some(s) = sup {
                self.sup = s;
            }
            self.trace.push(self.obj);
            true
        } else {
            false
        }
    }

    fn run(&mut self, s: usize, support: Support, iters: usize) {
        for _ in 0..iters {
            let before = self.obj;
            if support == Support::Free {
                if let Some(sup) = reselect(self.u, &self.f, s) {
                    if let Some(r) = r_step(self.u, &self.f, &sup) {
                        self.try_accept(self.f.clone(), r, Some(sup));
                    }
                }
            }
            if let Some(f) = f_step(self.u, &self.r) {
                self.try_accept(f, self.r.clone(), None);
            }
            if let Some(r) = r_step(self.u, &self.f, &self.sup) {
                self.try_accept(self.f.clone(), r, None);
            }
            if before - self.obj <= 1e-14 * (1.0 + before) {
                break;
            }
        }
    }
}

/// Alternating minimization of `||U - F R||_F` with `||R||_0 <= s` and square
/// `F`. Starts from `F = I, R = Phi*`, so the result never exceeds the
/// spatial error. Free support additionally restarts from the left singular
/// vectors of `U` and keeps the better run.
pub fn solve_interspace(u: &DMatrix<f64>, s: usize, support: Support, iters: usize) -> Result<SdlSolution> {
    check_budget(u, s)?;
    let m = u.nrows();
    let (phi, eps2) = solve_standard(u, s)?;
    let sup = phi.map(|v| v != 0.0);
    let sup = if sup.iter().filter(|b| **b).count() == s { sup } else { support_of_top(u, s)? };
    let mut best = Alternation { u, f: DMatrix::identity(m, m), r: phi, sup, obj: eps2, trace: vec![eps2] };
    best.run(s, support, iters);

    if support == Support::Free {
        let svd = u.clone().svd(true, false);
        if let Some(mut left) = svd.u {
            if left.ncols() < m {
                // wide U always gives a square factor; guard for m > n
                left = left.resize_horizontally(m, 0.0);
                for j in 0..m {
                    if left.column(j).norm() == 0.0 {
                        left[(j, j)] = 1.0;
                    }
                }
            }
            if let Some(sup) = reselect(u, &left, s) {
                if let Some(r) = r_step(u, &left, &sup) {
                    let obj = objective(u, &left, &r);
                    let mut alt = Alternation { u, f: left, r, sup, obj, trace: vec![obj] };
                    alt.run(s, support, iters);
                    if alt.obj < best.obj {
                        best = alt;
                    }
                }
            }
        }
    }
    if !best.obj.is_finite() {
        return Err(Error::Numeric("alternating minimization diverged".into()));
    }
    Ok(SdlSolution { f: best.f, r: best.r, eps1: best.obj, trace: best.trace })
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// `num / den` as `f64` without overflowing either operand.
fn ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    if num.bits() == 0 {
        return 0.0;
    }
    let shift = (den.bits() + 64).saturating_sub(num.bits());
    let q = (num << shift) / den;
    let half = (shift / 2) as i32;
    q.to_f64().unwrap_or(f64::INFINITY) * 2f64.powi(-half) * 2f64.powi(half - shift as i32)
}

fn check_instance(m: usize, n: usize, s: usize) -> Result<()> {
    if m <= 1 {
        return param_err(format!("m must exceed 1, got {m}"));
    }
    if s == 0 || s >= m * n {
        return param_err(format!("need 0 < s < m n = {}, got {s}", m * n));
    }
    Ok(())
}

/// `C(n, s/m) / C(mn, s)` if `m` divides `s`, else 0: the chance that the
/// spatial optimum keeps every column whole or drops it entirely.
pub fn theorem1_delta(m: usize, n: usize, s: usize) -> Result<f64> {
    check_instance(m, n, s)?;
    if s % m != 0 {
        return Ok(0.0);
    }
    let num = binomial(n as u64, (s / m) as u64);
    let den = binomial((m * n) as u64, s as u64);
    Ok(ratio_to_f64(&num, &den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloStats {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub delta: f64,
    pub trials: usize,
    /// Fraction with `eps1 < eps2 - 1e-9` under the fixed support.
    pub frac_strict_fixed: f64,
    pub frac_strict_free: f64,
    pub mean_gap_fixed: f64,
    pub mean_gap_free: f64,
}

/// Draws `trials` Gaussian `m x n` matrices and compares the interspace and
/// spatial errors. Errors if `eps1 > eps2 + 1e-9` in any trial.
pub fn montecarlo_verify(m: usize, n: usize, s: usize, trials: usize, iters: usize, rng: &Rng) -> Result<MonteCarloStats> {
    check_instance(m, n, s)?;
    if trials == 0 {
        return param_err("at least one trial required");
    }
    let delta = theorem1_delta(m, n, s)?;
    let (mut strict_fixed, mut strict_free, mut gap_fixed, mut gap_free) = (0usize, 0usize, 0.0, 0.0);
    for t in 0..trials {
        let mut r = rng.substream(t as u64);
        let u = DMatrix::from_fn(m, n, |_, _| r.standard_normal());
        let (_, eps2) = solve_standard(&u, s)?;
        for (support, strict, gap) in
            [(Support::Fixed, &mut strict_fixed, &mut gap_fixed), (Support::Free, &mut strict_free, &mut gap_free)]
        {
            let eps1 = solve_interspace(&u, s, support, iters)?.eps1;
            if eps1 > eps2 + 1e-9 {
                return Err(Error::Numeric(format!("trial {t}: eps1 {eps1} exceeds eps2 {eps2}")));
            }
            if eps1 < eps2 - 1e-9 {
                *strict += 1;
            }
            *gap += eps2 - eps1;
        }
    }
    let k = trials as f64;
    Ok(MonteCarloStats {
        m,
        n,
        s,
        delta,
        trials,
        frac_strict_fixed: strict_fixed as f64 / k,
        frac_strict_free: strict_free as f64 / k,
        mean_gap_fixed: gap_fixed / k,
        mean_gap_free: gap_free / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn gaussian(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = Rng::new(seed, 0);
        DMatrix::from_fn(m, n, |_, _| r.standard_normal())
    }

    /// Every support of size `s` of an `m x n` matrix, as bit masks.
    fn supports(len: usize, s: usize) -> Vec<u32> {
        (0u32..1 << len).filter(|b| b.count_ones() as usize == s).collect()
    }

    #[test]
    fn standard_examples() {
        let u = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 2.0, 4.0]);
        let (phi, eps2) = solve_standard(&u, 2).unwrap();
        assert_eq!(phi, DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]));
        assert!((eps2 - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(solve_standard(&u, 4).unwrap().1, 0.0);
        assert!(solve_standard(&u, 5).is_err());
    }

    #[test]
    fn standard_matches_exhaustive_search() {
        for seed in 0..20 {
            let u = gaussian(2, 2, seed);
            for s in 0..=4 {
                let best = supports(4, s)
                    .into_iter()
                    .map(|b| (0..4).filter(|i| b & (1 << i) == 0).map(|i| u[i] * u[i]).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!((solve_standard(&u, s).unwrap().1 - best).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn delta_examples() {
        assert_eq!(theorem1_delta(9, 2, 5).unwrap(), 0.0);
        assert!((theorem1_delta(9, 2, 9).unwrap() - 2.0 / 48620.0).abs() < 1e-18);
        assert!((theorem1_delta(2, 2, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(theorem1_delta(1, 5, 2).is_err());
        assert!(theorem1_delta(2, 2, 4).is_err());
        assert!(theorem1_delta(2, 2, 0).is_err());
        // far beyond f64 range for the binomials themselves
        let d = theorem1_delta(9, 1000, 4500).unwrap();
        assert!((0.0..1e-300).contains(&d));
    }

    #[test]
    fn delta_counts_whole_column_supports() {
        for (m, n) in [(2usize, 2usize), (2, 3), (3, 2)] {
            for s in 1..m * n {
                let all = supports(m * n, s);
                // column-major bit layout: entry (i, j) is bit j*m + i
                let whole = all
                    .iter()
                    .filter(|&&b| {
                        (0..n).all(|j| {
                            let c = (b >> (j * m)) & ((1 << m) - 1);
                            c == 0 || c == (1 << m) - 1
                        })
                    })
                    .count();
                let delta = theorem1_delta(m, n, s).unwrap();
                assert!((delta - whole as f64 / all.len() as f64).abs() < 1e-15, "{m} {n} {s}");
            }
        }
    }

    #[test]
    fn zero_iterations_reproduce_spatial_error() {
        let u = gaussian(3, 5, 1);
        let (_, eps2) = solve_standard(&u, 7).unwrap();
        let sol = solve_interspace(&u, 7, Support::Fixed, 0).unwrap();
        assert_eq!(sol.eps1, eps2);
        assert_eq!(sol.f, DMatrix::identity(3, 3));
    }

    #[test]
    fn rank_one_free_support_is_exact() {
        let mut r = Rng::new(2, 0);
        let a = DMatrix::from_fn(4, 1, |_, _| r.standard_normal());
        let b = DMatrix::from_fn(1, 6, |_, _| r.standard_normal());
        let u = &a * &b;
        let sol = solve_interspace(&u, 6, Support::Free, 30).unwrap();
        assert!(sol.eps1 < 1e-8, "{}", sol.eps1);
        assert!(sol.r.iter().filter(|v| **v != 0.0).count() <= 6);
    }

    #[test]
    fn small_instance_strictness_tracks_delta() {
        let stats = montecarlo_verify(2, 2, 2, 300, 50, &Rng::new(3, 0)).unwrap();
        assert!((stats.delta - 1.0 / 3.0).abs() < 1e-15);
        // strict unless both kept entries share a column: probability 1 - 1/3
        let sigma = (stats.delta * (1.0 - stats.delta) / 300.0).sqrt();
        assert!((stats.frac_strict_fixed - (1.0 - stats.delta)).abs() < 4.0 * sigma, "{stats:?}");
        assert!(stats.frac_strict_free >= stats.frac_strict_fixed);
    }

    #[test]
    fn montecarlo_rejects_bad_instances() {
        assert!(montecarlo_verify(1, 3, 1, 5, 5, &Rng::new(0, 0)).is_err());
        assert!(montecarlo_verify(3, 3, 9, 5, 5, &Rng::new(0, 0)).is_err());
        assert!(montecarlo_verify(3, 3, 3, 0, 5, &Rng::new(0, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn interspace_never_worse_and_monotone(m in 2usize..5, n in 1usize..7, seed in 0u64..1000, frac in 0.05f64..0.95, free in any::<bool>()) {
            let u = gaussian(m, n, seed);
            let s = ((frac * (m * n) as f64) as usize).clamp(1, m * n - 1);
            let (_, eps2) = solve_standard(&u, s).unwrap();
            let support = if free { Support::Free } else { Support::Fixed };
            let sol = solve_interspace(&u, s, support, 25).unwrap();
            prop_assert!(sol.eps1 <= eps2 + 1e-9);
            prop_assert!(sol.r.iter().filter(|v| **v != 0.0).count() <= s);
            prop_assert!((objective(&u, &sol.f, &sol.r) - sol.eps1).abs() < 1e-9);
            for w in sol.trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }

        #[test]
        fn delta_in_unit_interval(m in 2usize..6, n in 1usize..8, s in 1usize..40) {
            prop_assume!(s < m * n);
            let d = theorem1_delta(m, n, s).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            if s % m != 0 {
                prop_assert_eq!(d, 0.0);
            }
        }
    }
}
