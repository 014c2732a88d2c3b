//! Dense-covariance reference for the CAR(1) likelihood.
//!
//! Builds the full n x n correlation matrix, factorises it with a dense
//! Cholesky and solves the normal equations of the whitened problem. It
//! shares no code with the recursive fast path and is O(n^3), so it is meant
//! for checking, not fitting.

use nalgebra::{DMatrix, DVector};

use crate::car1::{check_phi, CorrelationSpec};
use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::gls::{GlsProblem, Method};

pub const MAX_ORACLE_ROWS: usize = 2000;

/// Block-diagonal correlation matrix `phi^|t_i - t_j|` within groups.
pub fn dense_correlation(problem: &GlsProblem, phi: f64) -> DMatrix<f64> {
    let n = problem.n();
    let t = problem.times();
    let mut lambda = DMatrix::<f64>::zeros(n, n);
    for g in problem.groups() {
        for &i in &g.rows {
            for &j in &g.rows {
                lambda[(i, j)] = if i == j { 1.0 } else { phi.powf((t[i] - t[j]).abs()) };
            }
        }
    }
    lambda
}

/// Negative (restricted) log-likelihood at `phi`, profiled over beta and
/// sigma^2, computed densely.
pub fn loglik_dense_oracle(problem: &GlsProblem, phi: f64, method: Method) -> Result<f64> {
    check_phi(phi)?;
    let (n, p) = (problem.n(), problem.p());
    if n > MAX_ORACLE_ROWS {
        return Err(Error::Input(format!("dense oracle limited to {MAX_ORACLE_ROWS} rows, got {n}")));
    }
    if n <= p {
        return Err(Error::Input("need n > p".into()));
    }
    let chol = dense_correlation(problem, phi)
        .cholesky()
        .ok_or_else(|| Error::Consistency("correlation matrix not positive definite".into()))?;
    let l = chol.l();
    let logdet_lambda: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let x = DMatrix::from_row_slice(n, p, problem.x());
    let y = DVector::from_column_slice(problem.y());
    let xt = l
        .solve_lower_triangular(&x)
        .ok_or_else(|| Error::Consistency("triangular solve failed".into()))?;
    let yt = l
        .solve_lower_triangular(&y)
        .ok_or_else(|| Error::Consistency("triangular solve failed".into()))?;

    let xtx = xt.transpose() * &xt;
    let xty = xt.transpose() * &yt;
    let xtx_chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular { columns: problem.column_labels().to_vec() })?;
    let beta = xtx_chol.solve(&xty);
    let resid = &yt - &xt * &beta;
    let rss = resid.dot(&resid);
    let logdet_xtx: f64 = 2.0 * xtx_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let two_pi = 2.0 * std::f64::consts::PI;
    let neg2 = match method {
        Method::Ml => {
            let nf = n as f64;
            nf * (two_pi * rss / nf).ln() + logdet_lambda + nf
        }
        Method::Reml => {
            let df = (n - p) as f64;
            df * (two_pi * rss / df).ln() + logdet_lambda + logdet_xtx + df
        }
    };
    Ok(0.5 * neg2)
}

/// [`loglik_dense_oracle`] for a design and correlation specification.
pub fn loglik_dense_oracle_design(design: &DesignMatrix, corr: &CorrelationSpec, phi: f64, method: Method) -> Result<f64> {
    loglik_dense_oracle(&GlsProblem::from_design(design, corr)?, phi, method)
}

/// `L^-1 z` for the dense Cholesky factor of one group's correlation.
pub fn dense_whiten(z: &[f64], times: &[f64], phi: f64) -> Result<(Vec<f64>, f64)> {
    check_phi(phi)?;
    let m = z.len();
    let lambda = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { phi.powf((times[i] - times[j]).abs()) });
    let chol = lambda
        .cholesky()
        .ok_or_else(|| Error::Consistency("correlation matrix not positive definite".into()))?;
    let l = chol.l();
    let e = l
        .solve_lower_triangular(&DVector::from_column_slice(z))
        .ok_or_else(|| Error::Consistency("triangular solve failed".into()))?;
    let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((e.iter().copied().collect(), logdet))
}
