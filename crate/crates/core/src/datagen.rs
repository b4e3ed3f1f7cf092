//! Synthetic cohorts: two correlated binary confounders, logistic treatment
//! assignment, a linear outcome and two auxiliary variables.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{self, expit, GlmError};
use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("invalid generative parameter: {0}")]
    InvalidParams(String),
    #[error("treatment intercept calibration did not converge")]
    CalibrationFailure,
    #[error("full-data propensity fit failed: {0}")]
    PropensityFit(#[from] GlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    pub n: usize,
    pub rho: f64,
    /// `None` calibrates the intercept to `target_treated_fraction`.
    pub alpha0: Option<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta_t: f64,
    pub sigma_y: f64,
    pub delta02: f64,
    pub delta12: f64,
    pub delta0ps: f64,
    pub delta1ps: f64,
    pub sigma_z: f64,
    pub target_treated_fraction: f64,
}

impl Default for GenerativeParams {
    fn default() -> Self {
        GenerativeParams {
            n: 2000,
            rho: 0.5,
            alpha0: None,
            alpha1: 2.0,
            alpha2: 2.0,
            beta0: 0.0,
            beta1: 2.0,
            beta2: 2.0,
            beta_t: 2.0,
            sigma_y: 10.0,
            delta02: 1.0,
            delta12: 10.0,
            delta0ps: 0.0,
            delta1ps: 10.0,
            sigma_z: 1.0,
            target_treated_fraction: 0.30,
        }
    }
}

impl GenerativeParams {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidParams(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad("rho must lie in (-1, 1)");
        }
        // sigma_y = 0 is allowed for noise-free checks; negative is not
        if !(self.sigma_y >= 0.0) || !(self.sigma_z >= 0.0) {
            return bad("noise standard deviations must be non-negative");
        }
        if self.alpha0.is_none() && !(self.target_treated_fraction > 0.0 && self.target_treated_fraction < 1.0) {
            return bad("target_treated_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Intercept in force: the fixed value, or the calibrated one.
    pub fn resolved_alpha0(&self) -> Result<f64, DatagenError> {
        match self.alpha0 {
            Some(a) => Ok(a),
            None => calibrate_treatment_intercept(self),
        }
    }
}

/// Joint probabilities of the four `(X₁, X₂)` cells, ordered
/// `[(0,0), (0,1), (1,0), (1,1)]`, for a bivariate normal with correlation
/// `rho` dichotomized at zero.
pub fn cell_probabilities(rho: f64) -> [f64; 4] {
    let concordant = 0.25 + rho.asin() / (2.0 * PI);
    let discordant = 0.25 - rho.asin() / (2.0 * PI);
    [concordant, discordant, discordant, concordant]
}

/// Finds `α₀` with `E[expit(α₀ + α₁X₁ + α₂X₂)]` equal to the target treated
/// fraction, the expectation taken analytically over the four cells.
pub fn calibrate_treatment_intercept(params: &GenerativeParams) -> Result<f64, DatagenError> {
    let target = params.target_treated_fraction;
    if !(target > 0.0 && target < 1.0) {
        return Err(DatagenError::InvalidParams("target_treated_fraction must lie in (0, 1)".into()));
    }
    let cells = cell_probabilities(params.rho);
    let offsets = [0.0, params.alpha2, params.alpha1, params.alpha1 + params.alpha2];
    let f = |a0: f64| -> f64 { cells.iter().zip(offsets).map(|(p, o)| p * expit(a0 + o)).sum::<f64>() - target };
    bisect(f, -60.0, 60.0, 1e-10, 200).ok_or(DatagenError::CalibrationFailure)
}

/// Root of an increasing function on `[lo, hi]` by bisection, stopping once
/// `|f| < tol`.
pub(crate) fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64, max_iter: usize) -> Option<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo > 0.0 || fhi < 0.0 {
        return None;
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() < tol {
            return Some(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    None
}

/// Columnar cohort. Binary columns hold 0/1.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x1: Vec<u8>,
    pub x2_true: Vec<u8>,
    pub x2: Vec<Option<u8>>,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub z2: Vec<f64>,
    pub zps_true: Vec<f64>,
    pub zps: Vec<Option<f64>>,
    /// Propensity score fitted on the full cohort before any masking.
    pub ps_full: Vec<f64>,
}

pub(crate) fn as_f64(v: &[u8]) -> Vec<f64> {
    v.iter().map(|&b| f64::from(b)).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn x1_f64(&self) -> Vec<f64> {
        as_f64(&self.x1)
    }

    pub fn x2_true_f64(&self) -> Vec<f64> {
        as_f64(&self.x2_true)
    }

    pub fn t_f64(&self) -> Vec<f64> {
        as_f64(&self.t)
    }

    pub fn x2_missing(&self) -> Vec<bool> {
        self.x2.iter().map(Option::is_none).collect()
    }

    pub fn zps_missing(&self) -> Vec<bool> {
        self.zps.iter().map(Option::is_none).collect()
    }

    pub fn has_missing(&self) -> bool {
        self.x2.iter().any(Option::is_none) || self.zps.iter().any(Option::is_none)
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1).count()
    }

    /// Rows in the given order (repeats allowed), masks travelling with rows.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        fn pick<T: Clone>(v: &[T], rows: &[usize]) -> Vec<T> {
            rows.iter().map(|&i| v[i].clone()).collect()
        }
        Dataset {
            x1: pick(&self.x1, rows),
            x2_true: pick(&self.x2_true, rows),
            x2: pick(&self.x2, rows),
            t: pick(&self.t, rows),
            y: pick(&self.y, rows),
            z2: pick(&self.z2, rows),
            zps_true: pick(&self.zps_true, rows),
            zps: pick(&self.zps, rows),
            ps_full: pick(&self.ps_full, rows),
        }
    }

    /// Checks column lengths and that every observed cell equals its truth.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.len();
        let lens = [
            self.x1.len(),
            self.x2_true.len(),
            self.x2.len(),
            self.y.len(),
            self.z2.len(),
            self.zps_true.len(),
            self.zps.len(),
            self.ps_full.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(format!("column lengths differ: {lens:?} vs {n}"));
        }
        for i in 0..n {
            if let Some(v) = self.x2[i] {
                if v != self.x2_true[i] {
                    return Err(format!("x2 row {i} disagrees with truth"));
                }
            }
            if let Some(v) = self.zps[i] {
                if v != self.zps_true[i] {
                    return Err(format!("zps row {i} disagrees with truth"));
                }
            }
            if !(self.ps_full[i] > 0.0 && self.ps_full[i] < 1.0) {
                return Err(format!("ps_full row {i} outside (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Draws one cohort. The returned dataset has no missing cells.
pub fn generate_dataset<R: Rng + ?Sized>(params: &GenerativeParams, rng: &mut R) -> Result<Dataset, DatagenError> {
    params.validate()?;
    let alpha0 = params.resolved_alpha0()?;
    let n = params.n;
    let rho_c = (1.0 - params.rho * params.rho).sqrt();

    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z2 = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        let l2 = params.rho * a + rho_c * b;
        let c1 = u8::from(a > 0.0);
        let c2 = u8::from(l2 > 0.0);
        let p = expit(alpha0 + params.alpha1 * f64::from(c1) + params.alpha2 * f64::from(c2));
        let ti = u8::from(rng.random::<f64>() < p);
        let ey: f64 = StandardNormal.sample(rng);
        let ez: f64 = StandardNormal.sample(rng);
        x1.push(c1);
        x2.push(c2);
        t.push(ti);
        y.push(
            params.beta0
                + params.beta1 * f64::from(c1)
                + params.beta2 * f64::from(c2)
                + params.beta_t * f64::from(ti)
                + params.sigma_y * ey,
        );
        z2.push(params.delta02 + params.delta12 * f64::from(c2) + params.sigma_z * ez);
    }

    let design = Matrix::with_intercept(&[as_f64(&x1), as_f64(&x2)]);
    let ps_full = glm::fit_logistic(&design, &as_f64(&t))?.fitted;
    let zps_true: Vec<f64> = ps_full
        .iter()
        .map(|&ps| {
            let e: f64 = StandardNormal.sample(rng);
            params.delta0ps + params.delta1ps * ps + params.sigma_z * e
        })
        .collect();

    Ok(Dataset {
        x2: x2.iter().copied().map(Some).collect(),
        x2_true: x2,
        x1,
        t,
        y,
        z2,
        zps: zps_true.iter().copied().map(Some).collect(),
        zps_true,
        ps_full,
    })
}

/// `1` where `v[i]` is strictly above the median, the median of an even-length
/// vector being the lower of the two middle order statistics.
pub fn dichotomize_at_median(v: &[f64]) -> Vec<u8> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    v.iter().map(|&x| u8::from(x > median)).collect()
}
