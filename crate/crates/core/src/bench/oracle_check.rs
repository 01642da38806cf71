//! Property suite of the closed-form bound against independent oracles.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::align::{
    discrete_emd, emd_upper_bound, estimate_stats, exact_w2_gaussian, full_cov_upper_bound,
    GaussianStats,
};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::rng::{self, Stream};

pub const FULL_COV_PAIRS: usize = 200;
pub const MAX_PAIR_DIM: usize = 16;
pub const SAMPLE_SETS: usize = 20;
pub const SAMPLES_PER_SET: usize = 64;
/// Width of the sampled Gaussians in the discrete chain.
pub const SAMPLE_DIM: usize = 2;
pub const TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    /// Largest violation seen, `<= 0` when every trial held.
    pub worst: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OracleCheck::passed)
    }
}

fn normal(s: &mut Stream) -> f64 {
    s.sample(StandardNormal)
}

fn random_spd(d: usize, s: &mut Stream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| normal(s));
    &g * g.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1
}

fn random_mean(d: usize, s: &mut Stream) -> DVector<f64> {
    DVector::from_fn(d, |_, _| 2.0 * normal(s))
}

fn tally(name: &'static str, margins: impl Iterator<Item = f64>) -> OracleCheck {
    let (mut trials, mut failures, mut worst) = (0, 0, f64::NEG_INFINITY);
    for v in margins {
        trials += 1;
        if v > 0.0 {
            failures += 1;
        }
        worst = worst.max(v);
    }
    OracleCheck {
        name,
        trials,
        failures,
        worst,
    }
}

/// Full-covariance pairs: the Frobenius bound never falls below exact W2^2.
pub fn check_full_cov(seed: u64) -> Result<OracleCheck> {
    let mut s = rng::stream(seed);
    let mut margins = Vec::with_capacity(FULL_COV_PAIRS);
    for _ in 0..FULL_COV_PAIRS {
        let d = s.random_range(1..=MAX_PAIR_DIM);
        let (ma, ca) = (random_mean(d, &mut s), random_spd(d, &mut s));
        let (mb, cb) = (random_mean(d, &mut s), random_spd(d, &mut s));
        let w2 = exact_w2_gaussian(&ma, &ca, &mb, &cb)?;
        let bound = full_cov_upper_bound(&ma, &ca, &mb, &cb)?;
        margins.push(w2 * w2 - TOLERANCE - bound);
    }
    Ok(tally("full_cov_bound", margins.into_iter()))
}

/// Diagonal pairs: the O(D) bound equals exact W2^2.
pub fn check_diagonal(seed: u64) -> Result<OracleCheck> {
    let mut s = rng::stream(seed);
    let mut margins = Vec::with_capacity(FULL_COV_PAIRS);
    for _ in 0..FULL_COV_PAIRS {
        let d = s.random_range(1..=MAX_PAIR_DIM);
        let draw = |s: &mut Stream| {
            let mu: Vec<f64> = (0..d).map(|_| 2.0 * normal(s)).collect();
            let var: Vec<f64> = (0..d).map(|_| s.random_range(0.05..3.0)).collect();
            (mu, var)
        };
        let (mua, va) = draw(&mut s);
        let (mub, vb) = draw(&mut s);
        let dense = |mu: &[f64], var: &[f64]| {
            (
                DVector::from_column_slice(mu),
                DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            )
        };
        let (ma, ca) = dense(&mua, &va);
        let (mb, cb) = dense(&mub, &vb);
        let w2 = exact_w2_gaussian(&ma, &ca, &mb, &cb)?;
        let bound = emd_upper_bound(&GaussianStats::new(mua, va)?, &GaussianStats::new(mub, vb)?)?;
        margins.push((bound - w2 * w2).abs() - TOLERANCE);
    }
    Ok(tally("diagonal_equality", margins.into_iter()))
}

fn sample_set(mu: &[f64], sd: &[f64], s: &mut Stream) -> Result<Tensor> {
    let d = mu.len();
    let data = (0..SAMPLES_PER_SET * d)
        .map(|i| mu[i % d] + sd[i % d] * normal(s))
        .collect();
    Tensor::new(vec![SAMPLES_PER_SET, d], data)
}

/// Matched-pair cost of two equal-size sets: mean and standard error.
fn matched_cost(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    let n = a.shape()[0];
    let d = a.shape()[1];
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (ra, rb) = (&a.data()[i * d..(i + 1) * d], &b.data()[j * d..(j + 1) * d]);
            cost[i * n + j] = ra
                .iter()
                .zip(rb)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    let assignment = crate::align::hungarian(&cost, n)?;
    let c: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .collect();
    let mean = c.iter().sum::<f64>() / n as f64;
    let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// Sample sets: the discrete EMD stays below the square root of the bound
/// on the estimated stats, up to three standard errors.
pub fn check_discrete(seed: u64) -> Result<OracleCheck> {
    let mut s = rng::stream(seed);
    let mut margins = Vec::with_capacity(SAMPLE_SETS);
    for _ in 0..SAMPLE_SETS {
        let draw = |s: &mut Stream| {
            let mu: Vec<f64> = (0..SAMPLE_DIM).map(|_| 3.0 * normal(s)).collect();
            let sd: Vec<f64> = (0..SAMPLE_DIM).map(|_| s.random_range(0.5..1.5)).collect();
            sample_set(&mu, &sd, s)
        };
        let a = draw(&mut s)?;
        let b = draw(&mut s)?;
        let emd = discrete_emd(&a, &b)?;
        let (_, se) = matched_cost(&a, &b)?;
        let bound = emd_upper_bound(&estimate_stats(&a)?, &estimate_stats(&b)?)?;
        margins.push(emd - bound.sqrt() - 3.0 * se);
    }
    Ok(tally("discrete_chain", margins.into_iter()))
}

pub fn oracle_check(seed: u64) -> Result<OracleReport> {
    Ok(OracleReport {
        checks: vec![
            check_full_cov(rng::derive(seed, 1))?,
            check_diagonal(rng::derive(seed, 2))?,
            check_discrete(rng::derive(seed, 3))?,
        ],
    })
}

pub const ORACLE_CSV_HEADER: &str = "check,trials,failures,worst_margin,passed";

pub fn write_oracle_csv<W: Write>(out: &mut W, report: &OracleReport) -> Result<()> {
    writeln!(out, "{ORACLE_CSV_HEADER}")?;
    for c in &report.checks {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.name,
            c.trials,
            c.failures,
            c.worst,
            c.passed()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_counts_trials() {
        let r = oracle_check(0).unwrap();
        assert!(r.passed(), "{r:?}");
        let trials: Vec<_> = r.checks.iter().map(|c| c.trials).collect();
        assert_eq!(trials, vec![FULL_COV_PAIRS, FULL_COV_PAIRS, SAMPLE_SETS]);
    }

    #[test]
    fn matched_cost_mean_is_the_discrete_emd() {
        let mut s = rng::stream(2);
        let a = sample_set(&[0.0, 1.0], &[1.0, 1.0], &mut s).unwrap();
        let b = sample_set(&[2.0, 0.0], &[0.5, 1.0], &mut s).unwrap();
        let (mean, se) = matched_cost(&a, &b).unwrap();
        approx::assert_relative_eq!(mean, discrete_emd(&a, &b).unwrap(), epsilon = 1e-12);
        assert!(se > 0.0);
    }
}
