//! Reference transport distances used to check the bound.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{config_err, dim_err, Error, Result};

/// Largest negative eigenvalue tolerated as rounding noise.
const PSD_TOLERANCE: f64 = 1e-10;

fn check_square(m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return dim_err(format!(
            "covariance is {}x{} but the mean has length {d}",
            m.nrows(),
            m.ncols()
        ));
    }
    Ok(())
}

/// Principal square root of a symmetric positive semi-definite matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE) {
        return Err(Error::Domain(format!(
            "covariance is not positive semi-definite (eigenvalue {bad:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Exact 2-Wasserstein distance between two Gaussians.
pub fn exact_w2_gaussian(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d {
        return dim_err("means of unequal length");
    }
    check_square(cov_a, d)?;
    check_square(cov_b, d)?;
    let root_b = psd_sqrt(cov_b)?;
    psd_sqrt(cov_a)?;
    let cross = psd_sqrt(&(&root_b * cov_a * &root_b))?;
    let bures = (cov_a + cov_b - cross * 2.0).trace();
    let mean_sq = (mu_a - mu_b).norm_squared();
    Ok((mean_sq + bures).max(0.0).sqrt())
}

/// Full-covariance form of the bound: `|dmu|^2 + |Sa^1/2 - Sb^1/2|_F^2`.
/// With diagonal covariances it reduces to the `O(D)` bound.
pub fn full_cov_upper_bound(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d {
        return dim_err("means of unequal length");
    }
    check_square(cov_a, d)?;
    check_square(cov_b, d)?;
    let diff = psd_sqrt(cov_a)? - psd_sqrt(cov_b)?;
    Ok((mu_a - mu_b).norm_squared() + diff.norm_squared())
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return dim_err(format!(
            "cost matrix of {} entries is not {n}x{n}",
            cost.len()
        ));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Shortest augmenting paths with row/column potentials; index 0 is a
    // sentinel column.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = inf;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + col - 1] - u[i0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for col in 1..=n {
        assign[owner[col] - 1] = col - 1;
    }
    Ok(assign)
}

/// Largest sample count accepted by [`discrete_emd`].
pub const MAX_DISCRETE_SAMPLES: usize = 128;

/// Exact 1-Wasserstein distance between two equal-size uniform point
/// clouds (`[S, D]` each) under the Euclidean cost.
pub fn discrete_emd(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return dim_err(format!(
            "point clouds {:?} and {:?} are not [S, D] with equal D",
            a.shape(),
            b.shape()
        ));
    }
    let n = a.shape()[0];
    if b.shape()[0] != n {
        return config_err(format!(
            "discrete EMD needs equal sample counts, got {n} and {}",
            b.shape()[0]
        ));
    }
    if n == 0 {
        return Err(Error::EmptyInput("discrete EMD of empty clouds".into()));
    }
    if n > MAX_DISCRETE_SAMPLES {
        return config_err(format!("at most {MAX_DISCRETE_SAMPLES} samples, got {n}"));
    }
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let d: f64 = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            cost.push(d.sqrt());
        }
    }
    let assign = hungarian(&cost, n)?;
    Ok(assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum::<f64>()
        / n as f64)
}
