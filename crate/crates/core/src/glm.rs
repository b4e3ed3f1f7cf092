//! Regression kernels: ordinary least squares, logistic maximum likelihood by
//! iteratively reweighted least squares, and the cluster-robust sandwich
//! covariance used for matched-pair inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{cholesky_inverse, cholesky_solve, Matrix};

/// Gradient ∞-norm at which IRLS stops.
pub const LOGISTIC_GRADIENT_TOL: f64 = 1e-8;
pub const LOGISTIC_MAX_ITER: usize = 50;
/// Coefficient magnitude beyond which a non-converging fit is reported as
/// separation.
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("design has {rows} rows but response has {response}")]
    DimensionMismatch { rows: usize, response: usize },
    #[error("need at least as many rows as columns ({rows} < {cols})")]
    TooFewRows { rows: usize, cols: usize },
    #[error("design matrix is singular (rank deficient)")]
    SingularDesign,
    #[error("logistic response must be 0/1 with both classes present")]
    InvalidResponse,
    #[error("complete or quasi-complete separation after {iterations} iterations")]
    Separation { iterations: usize },
    #[error("IRLS did not converge in {iterations} iterations (gradient {gradient:e})")]
    NonConvergence { iterations: usize, gradient: f64 },
    #[error("every row needs a cluster id ({ids} ids for {rows} rows)")]
    ClusterMismatch { ids: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Logistic,
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub coefficients: Vec<f64>,
    /// `σ̂²(XᵀX)⁻¹` for linear fits, inverse observed information for logistic.
    pub covariance_model: Matrix,
    pub fitted: Vec<f64>,
    pub family: Family,
    pub converged: bool,
    pub iterations: usize,
}

impl RegressionFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.covariance_model.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_shape(design: &Matrix, response: &[f64]) -> Result<(), GlmError> {
    if design.nrows() != response.len() {
        return Err(GlmError::DimensionMismatch { rows: design.nrows(), response: response.len() });
    }
    if design.nrows() < design.ncols() {
        return Err(GlmError::TooFewRows { rows: design.nrows(), cols: design.ncols() });
    }
    Ok(())
}

/// Ordinary least squares via the normal equations.
pub fn fit_linear(design: &Matrix, response: &[f64]) -> Result<RegressionFit, GlmError> {
    check_shape(design, response)?;
    let n = design.nrows();
    let p = design.ncols();
    let l = design.gram(None).cholesky().ok_or(GlmError::SingularDesign)?;
    let coefficients = cholesky_solve(&l, &design.tr_mul_vec(response));
    let fitted = design.mul_vec(&coefficients);
    let rss: f64 = response.iter().zip(&fitted).map(|(y, f)| (y - f) * (y - f)).sum();
    let sigma2 = if n > p { rss / (n - p) as f64 } else { 0.0 };
    let covariance_model = cholesky_inverse(&l).scale(sigma2);
    Ok(RegressionFit { coefficients, covariance_model, fitted, family: Family::Linear, converged: true, iterations: 1 })
}

/// Logistic regression by Newton–Raphson (IRLS) from zero coefficients.
pub fn fit_logistic(design: &Matrix, response: &[f64]) -> Result<RegressionFit, GlmError> {
    irls(design, response, None)
}

/// Logistic regression with non-negative prior weights on each row.
///
/// Used by the imputation layer to stabilise fits with pseudo-observations;
/// the analysis models are always unweighted.
pub fn fit_logistic_weighted(design: &Matrix, response: &[f64], weights: &[f64]) -> Result<RegressionFit, GlmError> {
    assert_eq!(weights.len(), response.len(), "weights length mismatch");
    irls(design, response, Some(weights))
}

fn log_likelihood(eta: &[f64], y: &[f64], w: Option<&[f64]>) -> f64 {
    let mut ll = 0.0;
    for (i, (&e, &yi)) in eta.iter().zip(y).enumerate() {
        // y·η − log(1 + e^η), computed without overflow
        let soft = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        ll += w.map_or(1.0, |w| w[i]) * (yi * e - soft);
    }
    ll
}

fn irls(design: &Matrix, y: &[f64], weights: Option<&[f64]>) -> Result<RegressionFit, GlmError> {
    check_shape(design, y)?;
    let (mut has0, mut has1) = (false, false);
    for (i, &v) in y.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if v == 0.0 {
            has0 |= w > 0.0;
        } else if v == 1.0 {
            has1 |= w > 0.0;
        } else {
            return Err(GlmError::InvalidResponse);
        }
    }
    if !(has0 && has1) {
        return Err(GlmError::InvalidResponse);
    }

    let n = design.nrows();
    let p = design.ncols();
    let mut beta = vec![0.0; p];
    let mut eta = vec![0.0; n];
    let mut ll = log_likelihood(&eta, y, weights);
    let mut mu = vec![0.0; n];
    let mut work = vec![0.0; n];
    let mut resid = vec![0.0; n];

    for iter in 0..=LOGISTIC_MAX_ITER {
        for i in 0..n {
            let m = expit(eta[i]);
            let w = weights.map_or(1.0, |w| w[i]);
            mu[i] = m;
            work[i] = w * m * (1.0 - m);
            resid[i] = w * (y[i] - m);
        }
        let grad = design.tr_mul_vec(&resid);
        let gnorm = grad.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
        let max_beta = beta.iter().fold(0.0_f64, |a: f64, b: &f64| a.max(b.abs()));
        let hessian = design.gram(Some(&work));
        let chol = match hessian.cholesky() {
            Some(l) => l,
            None if iter == 0 => return Err(GlmError::SingularDesign),
            None => return Err(GlmError::Separation { iterations: iter }),
        };
        // a near-zero deviance means the classes are perfectly separated
        if gnorm < LOGISTIC_GRADIENT_TOL && -ll < 1e-6 && weights.is_none() {
            return Err(GlmError::Separation { iterations: iter });
        }
        if gnorm < LOGISTIC_GRADIENT_TOL {
            return Ok(RegressionFit {
                coefficients: beta,
                covariance_model: cholesky_inverse(&chol),
                fitted: mu,
                family: Family::Logistic,
                converged: true,
                iterations: iter,
            });
        }
        // pseudo-observations keep weighted fits finite, so the bound only
        // guards unweighted ones
        if weights.is_none() && max_beta > SEPARATION_BOUND {
            return Err(GlmError::Separation { iterations: iter });
        }
        if iter == LOGISTIC_MAX_ITER {
            return Err(GlmError::NonConvergence { iterations: iter, gradient: gnorm });
        }

        let step = cholesky_solve(&chol, &grad);
        let mut scale = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let cand_eta = design.mul_vec(&cand);
            let cand_ll = log_likelihood(&cand_eta, y, weights);
            // the slack absorbs rounding in the log-likelihood sum at large n
            if cand_ll >= ll - 1e-9 * ll.abs().max(1.0) || scale < 1e-3 {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
        }
    }
    unreachable!("IRLS loop returns on its last iteration")
}

/// Cluster-robust sandwich covariance `A⁻¹ B A⁻¹`.
///
/// The bread `A` is `XᵀX` (linear) or `XᵀŴX` (logistic); the meat sums, over
/// clusters, the outer product of the per-cluster score `Σ xᵢ rᵢ` with
/// `rᵢ = yᵢ − fittedᵢ`. No small-sample correction factor is applied.
pub fn robust_cluster_vcov(
    fit: &RegressionFit,
    design: &Matrix,
    response: &[f64],
    cluster_ids: &[usize],
) -> Result<Matrix, GlmError> {
    check_shape(design, response)?;
    if cluster_ids.len() != design.nrows() {
        return Err(GlmError::ClusterMismatch { ids: cluster_ids.len(), rows: design.nrows() });
    }
    let p = design.ncols();
    let bread = match fit.family {
        Family::Linear => design.gram(None),
        Family::Logistic => {
            let w: Vec<f64> = fit.fitted.iter().map(|m| m * (1.0 - m)).collect();
            design.gram(Some(&w))
        }
    };
    let bread_inv = cholesky_inverse(&bread.cholesky().ok_or(GlmError::SingularDesign)?);

    let mut scores: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, &c) in cluster_ids.iter().enumerate() {
        let r = response[i] - fit.fitted[i];
        let s = scores.entry(c).or_insert_with(|| vec![0.0; p]);
        for (j, sj) in s.iter_mut().enumerate() {
            *sj += design.get(i, j) * r;
        }
    }
    let mut meat = Matrix::zeros(p, p);
    for s in scores.values() {
        for a in 0..p {
            for b in 0..p {
                meat.set(a, b, meat.get(a, b) + s[a] * s[b]);
            }
        }
    }
    let mut v = bread_inv.matmul(&meat).matmul(&bread_inv);
    crate::matrix::symmetrize(&mut v);
    Ok(v)
}
