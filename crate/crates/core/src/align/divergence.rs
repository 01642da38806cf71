//! Alternative alignment objectives: kernel MMD and a Monte-Carlo
//! Jensen-Shannon divergence between diagonal Gaussians.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use super::{GaussianStats, StatsVars};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    /// Drops the `i == j` terms; can be slightly negative.
    #[default]
    Unbiased,
    /// V-statistic; zero when both sample sets coincide.
    Biased,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn check_samples(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return dim_err(format!(
            "sample sets {:?} and {:?} are not [S, D] with equal D",
            a.shape(),
            b.shape()
        ));
    }
    if a.shape()[0] < 2 || b.shape()[0] < 2 {
        return Err(Error::Estimator(
            "MMD needs at least two samples per side".into(),
        ));
    }
    Ok(())
}

/// Median pairwise distance over the pooled samples, or 1 when that is 0.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.shape()[0])
        .map(|i| a.row(i))
        .chain((0..b.shape()[0]).map(|i| b.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Squared MMD with the Gaussian kernel `exp(-|x - y|^2 / (2 h^2))`.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: f64, estimator: MmdEstimator) -> Result<f64> {
    check_samples(a, b)?;
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!(
            "MMD bandwidth must be positive, got {bandwidth}"
        )));
    }
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * bandwidth * bandwidth)).exp();
    let self_term = |t: &Tensor| {
        let n = t.shape()[0];
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j || estimator == MmdEstimator::Biased {
                    s += k(t.row(i), t.row(j));
                }
            }
        }
        match estimator {
            MmdEstimator::Unbiased => s / (n * (n - 1)) as f64,
            MmdEstimator::Biased => s / (n * n) as f64,
        }
    };
    let (m, n) = (a.shape()[0], b.shape()[0]);
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += k(a.row(i), b.row(j));
        }
    }
    Ok(self_term(a) + self_term(b) - 2.0 * cross / (m * n) as f64)
}

/// Sum over `i, j` of `k(x_i, y_j)`, skipping `i == j` when `skip_diagonal`.
fn kernel_sum_on(
    tape: &mut Tape,
    x: Var,
    y: Var,
    inv_two_h2: f64,
    skip_diagonal: bool,
) -> Result<Var> {
    let (s, t) = (tape.try_value(x)?.shape()[0], tape.try_value(y)?.shape()[0]);
    let ysq = tape.square(y)?;
    let ynorm = tape.reduce_sum(ysq, 1)?;
    let mut sums = Vec::with_capacity(s);
    for i in 0..s {
        let xi = tape.row(x, i)?;
        let dots = tape.matvec(y, xi)?;
        let xsq = tape.square(xi)?;
        let xn = tape.reduce_sum(xsq, 0)?;
        let xn = tape.broadcast_rows(xn, t)?;
        let two_dots = tape.scale(dots, 2.0)?;
        let d = tape.add(xn, ynorm)?;
        let d = tape.sub(d, two_dots)?;
        let arg = tape.scale(d, -inv_two_h2)?;
        let mut kv = tape.exp(arg)?;
        if skip_diagonal {
            let mask = tape.constant(Tensor::from_fn(vec![t], |j| if j == i { 0.0 } else { 1.0 }));
            kv = tape.hadamard(kv, mask)?;
        }
        sums.push(tape.reduce_sum(kv, 0)?);
    }
    let stacked = tape.stack(&sums)?;
    tape.reduce_sum(stacked, 0)
}

/// Tape form of [`mmd`] over `[S, D]` and `[T, D]` sample nodes.
pub fn mmd_on(
    tape: &mut Tape,
    a: Var,
    b: Var,
    bandwidth: f64,
    estimator: MmdEstimator,
) -> Result<Var> {
    check_samples(tape.try_value(a)?, tape.try_value(b)?)?;
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!(
            "MMD bandwidth must be positive, got {bandwidth}"
        )));
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let (m, n) = (
        tape.value(a).shape()[0] as f64,
        tape.value(b).shape()[0] as f64,
    );
    let unbiased = estimator == MmdEstimator::Unbiased;
    let norm = |n: f64| if unbiased { n * (n - 1.0) } else { n * n };
    let kaa = kernel_sum_on(tape, a, a, g, unbiased)?;
    let kbb = kernel_sum_on(tape, b, b, g, unbiased)?;
    let kab = kernel_sum_on(tape, a, b, g, false)?;
    let kaa = tape.scale(kaa, 1.0 / norm(m))?;
    let kbb = tape.scale(kbb, 1.0 / norm(n))?;
    let kab = tape.scale(kab, 2.0 / (m * n))?;
    let s = tape.add(kaa, kbb)?;
    tape.sub(s, kab)
}

/// Monte-Carlo draws per side.
pub const JS_SAMPLES: usize = 2048;
const JS_SEED: u64 = 0x6a73_5f6d_635f_7365;

/// Log-density of `[S, D]` points under a diagonal Gaussian, without the
/// `2 pi` constant (it cancels inside the divergence).
fn log_density_on(tape: &mut Tape, x: Var, s: StatsVars, rows: usize) -> Result<Var> {
    let mu = tape.broadcast_rows(s.mu, rows)?;
    let var = tape.broadcast_rows(s.var, rows)?;
    let logv = tape.log(s.var)?;
    let logv = tape.broadcast_rows(logv, rows)?;
    let d = tape.sub(x, mu)?;
    let d = tape.square(d)?;
    let q = tape.div(d, var)?;
    let q = tape.add(q, logv)?;
    let q = tape.reduce_sum(q, 1)?;
    tape.scale(q, -0.5)
}

/// `E_a[log p_a - log m]` with `x = mu_a + sqrt(var_a) * eps`.
fn js_half_on(tape: &mut Tape, a: StatsVars, b: StatsVars, eps: Var, rows: usize) -> Result<Var> {
    let sd = tape.sqrt(a.var)?;
    let sd = tape.broadcast_rows(sd, rows)?;
    let mu = tape.broadcast_rows(a.mu, rows)?;
    let x = tape.hadamard(sd, eps)?;
    let x = tape.add(mu, x)?;
    let la = log_density_on(tape, x, a, rows)?;
    let lb = log_density_on(tape, x, b, rows)?;
    let lm = tape.logaddexp(la, lb)?;
    let diff = tape.sub(la, lm)?;
    let mean = tape.reduce_mean(diff, 0)?;
    let ln2 = tape.constant(Tensor::scalar(LN_2));
    tape.add(mean, ln2)
}

/// Standard-normal draws shared by both sides of the estimate.
pub fn js_noise(dim: usize) -> Tensor {
    rng::normal(&[JS_SAMPLES, dim], 1.0, &mut rng::stream(JS_SEED))
}

/// Jensen-Shannon divergence on the tape. Both halves reuse the same `eps`
/// draws, so swapping `a` and `b` only swaps the two addends.
pub fn js_divergence_on(tape: &mut Tape, a: StatsVars, b: StatsVars, eps: &Tensor) -> Result<Var> {
    let d = tape.try_value(a.mu)?.numel();
    if tape.try_value(b.mu)?.numel() != d || eps.rank() != 2 || eps.shape()[1] != d {
        return dim_err("JS divergence operands disagree in dimension");
    }
    let rows = eps.shape()[0];
    let e = tape.constant(eps.clone());
    let ab = js_half_on(tape, a, b, e, rows)?;
    let ba = js_half_on(tape, b, a, e, rows)?;
    let ab = tape.scale(ab, 0.5)?;
    let ba = tape.scale(ba, 0.5)?;
    tape.add(ab, ba)
}

pub fn js_divergence(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return dim_err(format!("stats of dimension {} and {}", a.dim(), b.dim()));
    }
    let mut tape = Tape::new();
    let av = StatsVars::constant(&mut tape, a);
    let bv = StatsVars::constant(&mut tape, b);
    let out = js_divergence_on(&mut tape, av, bv, &js_noise(a.dim()))?;
    Ok(tape.value(out).item())
}
