//! Multiple imputation by chained equations.
//!
//! Each of the `m` chains starts by filling masked cells with draws from the
//! observed values of the same column, then runs `maxit` passes over the
//! planned columns in order. A pass refits each column's imputation model on
//! the currently completed data and redraws that column's masked cells:
//! predictive mean matching for continuous columns, Bayesian logistic
//! regression for binary ones. A `PassiveDerivePs` entry recomputes the
//! propensity column from the current `X₁`, `X₂` instead of drawing.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::glm::{self, expit, GlmError};
use crate::matrix::Matrix;
use crate::rng::{stage, SimRng, StreamKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiceError {
    #[error("invalid imputation spec: {0}")]
    InvalidSpec(String),
    #[error("column {0} is masked but has no imputation model")]
    UnplannedColumn(ColumnId),
    #[error("column {column}: {reason}")]
    Degenerate { column: ColumnId, reason: String },
    #[error("imputation model for {column} failed: {source}")]
    Fit { column: ColumnId, source: GlmError },
    #[error("chain {chain} failed: {source}")]
    Chain { chain: usize, source: Box<MiceError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnId {
    X1,
    X2,
    T,
    Y,
    Z2,
    Zps,
    Ps,
}

impl ColumnId {
    const ALL: [ColumnId; 7] = [ColumnId::X1, ColumnId::X2, ColumnId::T, ColumnId::Y, ColumnId::Z2, ColumnId::Zps, ColumnId::Ps];

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ColumnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnId::X1 => "x1",
            ColumnId::X2 => "x2",
            ColumnId::T => "t",
            ColumnId::Y => "y",
            ColumnId::Z2 => "z2",
            ColumnId::Zps => "zps",
            ColumnId::Ps => "ps",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMethod {
    Pmm,
    Logreg,
    PassiveDerivePs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnPlan {
    pub column: ColumnId,
    pub method: ImputeMethod,
    pub predictors: Vec<ColumnId>,
}

impl ColumnPlan {
    pub fn new(column: ColumnId, method: ImputeMethod, predictors: &[ColumnId]) -> Self {
        ColumnPlan { column, method, predictors: predictors.to_vec() }
    }

    pub fn derive_ps() -> Self {
        ColumnPlan { column: ColumnId::Ps, method: ImputeMethod::PassiveDerivePs, predictors: vec![ColumnId::X1, ColumnId::X2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSpec {
    pub m: usize,
    pub maxit: usize,
    /// Visited in this order on every pass.
    pub columns: Vec<ColumnPlan>,
    pub pmm_donors: usize,
    /// The propensity score is a column of its own, initialised from the
    /// complete-case fit and imputed like any other.
    pub active_ps: bool,
}

impl Default for ImputationSpec {
    fn default() -> Self {
        ImputationSpec { m: 50, maxit: 5, columns: Vec::new(), pmm_donors: 5, active_ps: false }
    }
}

impl ImputationSpec {
    pub fn validate(&self) -> Result<(), MiceError> {
        let bad = |m: String| Err(MiceError::InvalidSpec(m));
        if self.m < 2 {
            return bad("m must be at least 2".into());
        }
        if self.maxit < 1 {
            return bad("maxit must be at least 1".into());
        }
        if self.pmm_donors < 1 {
            return bad("pmm_donors must be at least 1".into());
        }
        for plan in &self.columns {
            if plan.predictors.contains(&plan.column) {
                return bad(format!("{} predicts itself", plan.column));
            }
            match plan.method {
                ImputeMethod::PassiveDerivePs if plan.column != ColumnId::Ps => {
                    return bad(format!("passive derivation targets ps, not {}", plan.column));
                }
                ImputeMethod::PassiveDerivePs if self.active_ps => {
                    return bad("ps cannot be both active and passive".into());
                }
                ImputeMethod::Logreg if !matches!(plan.column, ColumnId::X2) => {
                    return bad(format!("logreg applies to binary columns, not {}", plan.column));
                }
                _ => {}
            }
            if plan.column == ColumnId::Ps && plan.method == ImputeMethod::Pmm && !self.active_ps {
                return bad("imputing ps requires active_ps".into());
            }
        }
        if self.active_ps && !self.columns.iter().any(|c| c.column == ColumnId::Ps && c.method == ImputeMethod::Pmm) {
            return bad("active_ps needs a pmm entry for ps".into());
        }
        Ok(())
    }

    fn has_passive(&self) -> bool {
        self.columns.iter().any(|c| c.method == ImputeMethod::PassiveDerivePs)
    }
}

/// `m` completed copies of a dataset.
#[derive(Debug, Clone)]
pub struct ImputedStack {
    /// Every masked `x2`/`zps` cell filled; observed cells untouched.
    pub completions: Vec<Dataset>,
    /// Per-completion propensity scores, filled in by the strategy layer.
    pub ps: Vec<Vec<f64>>,
    /// Per-completion propensity-model coefficients `(α̂₀, α̂₁, α̂₂)` when the
    /// score was derived rather than imputed.
    pub ps_coefficients: Vec<Vec<f64>>,
    /// Final state of the imputed propensity column in active mode.
    pub imputed_ps: Option<Vec<Vec<f64>>>,
    /// `X₂` mask of the source dataset.
    pub x2_missing: Vec<bool>,
    pub provenance: ImputationSpec,
}

impl ImputedStack {
    pub fn m(&self) -> usize {
        self.completions.len()
    }

    /// Complete copies of a dataset without masked cells.
    pub fn identical(d: &Dataset, spec: &ImputationSpec) -> Self {
        ImputedStack {
            completions: vec![d.clone(); spec.m],
            ps: Vec::new(),
            ps_coefficients: Vec::new(),
            imputed_ps: None,
            x2_missing: d.x2_missing(),
            provenance: spec.clone(),
        }
    }
}

/// Working copy of the imputation-relevant columns.
#[derive(Debug, Clone)]
struct Frame {
    values: [Vec<f64>; 7],
    missing: [Vec<bool>; 7],
}

impl Frame {
    fn n(&self) -> usize {
        self.values[0].len()
    }

    fn col(&self, c: ColumnId) -> &[f64] {
        &self.values[c.slot()]
    }

    fn mask(&self, c: ColumnId) -> &[bool] {
        &self.missing[c.slot()]
    }

    fn n_missing(&self, c: ColumnId) -> usize {
        self.mask(c).iter().filter(|&&m| m).count()
    }

    fn predictors(&self, cols: &[ColumnId]) -> Matrix {
        let cs: Vec<&[f64]> = cols.iter().map(|&c| self.col(c)).collect();
        if cs.is_empty() {
            return Matrix::zeros(self.n(), 0);
        }
        Matrix::from_columns(&cs)
    }

    fn derive_ps(&mut self) -> Result<Vec<f64>, MiceError> {
        let design = Matrix::with_intercept(&[self.col(ColumnId::X1), self.col(ColumnId::X2)]);
        let fit = glm::fit_logistic(&design, self.col(ColumnId::T)).map_err(|source| MiceError::Fit { column: ColumnId::Ps, source })?;
        self.values[ColumnId::Ps.slot()] = fit.fitted;
        self.missing[ColumnId::Ps.slot()] = vec![false; self.n()];
        Ok(fit.coefficients)
    }
}

fn frame_from(d: &Dataset, active_ps: bool) -> Result<Frame, MiceError> {
    let n = d.len();
    let none = vec![false; n];
    let x2_missing = d.x2_missing();
    let mut values: [Vec<f64>; 7] = Default::default();
    let mut missing: [Vec<bool>; 7] = Default::default();
    values[ColumnId::X1.slot()] = d.x1_f64();
    values[ColumnId::X2.slot()] = d.x2.iter().map(|v| v.map_or(f64::NAN, f64::from)).collect();
    values[ColumnId::T.slot()] = d.t_f64();
    values[ColumnId::Y.slot()] = d.y.clone();
    values[ColumnId::Z2.slot()] = d.z2.clone();
    values[ColumnId::Zps.slot()] = d.zps.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    values[ColumnId::Ps.slot()] = vec![f64::NAN; n];
    for c in ColumnId::ALL {
        missing[c.slot()] = none.clone();
    }
    missing[ColumnId::X2.slot()] = x2_missing.clone();
    missing[ColumnId::Zps.slot()] = d.zps_missing();
    missing[ColumnId::Ps.slot()] = vec![true; n];

    if active_ps {
        // complete-case propensity fit; rows with X₂ masked start out missing
        let rows: Vec<usize> = (0..n).filter(|&i| !x2_missing[i]).collect();
        let design = Matrix::with_intercept(&[values[ColumnId::X1.slot()].clone(), values[ColumnId::X2.slot()].clone()]).select_rows(&rows);
        let t: Vec<f64> = rows.iter().map(|&i| values[ColumnId::T.slot()][i]).collect();
        let fit = glm::fit_logistic(&design, &t).map_err(|source| MiceError::Fit { column: ColumnId::Ps, source })?;
        for (k, &i) in rows.iter().enumerate() {
            values[ColumnId::Ps.slot()][i] = fit.fitted[k];
            missing[ColumnId::Ps.slot()][i] = false;
        }
    }
    Ok(Frame { values, missing })
}

/// Drops predictors that are near-constant, almost perfectly correlated with
/// the target, or nearly a linear combination of predictors kept before them.
/// Statistics use observed rows of the target only.
fn usable_predictors(x: &Matrix, y: &[f64], missing: &[bool]) -> Vec<usize> {
    const EPS: f64 = 1e-4;
    const MAX_COR: f64 = 0.99;
    let obs: Vec<usize> = (0..y.len()).filter(|&i| !missing[i]).collect();
    if obs.len() < 2 {
        return Vec::new();
    }
    let (ym, yv) = mean_var(obs.iter().map(|&i| y[i]));
    if yv < EPS {
        return Vec::new();
    }
    let mut centred: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let c = x.col(j);
        let (xm, xv) = mean_var(obs.iter().map(|&i| c[i]));
        if xv <= EPS {
            continue;
        }
        let xs: Vec<f64> = obs.iter().map(|&i| c[i] - xm).collect();
        let cov: f64 = xs.iter().zip(&obs).map(|(a, &i)| a * (y[i] - ym)).sum::<f64>() / (obs.len() - 1) as f64;
        if cov / (xv * yv).sqrt() >= MAX_COR {
            continue;
        }
        // residual of the standardised column after projecting on kept ones
        let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut r: Vec<f64> = xs.iter().map(|v| v / norm).collect();
        for q in &centred {
            let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>();
        if rn < EPS {
            continue;
        }
        let rs = rn.sqrt();
        centred.push(r.into_iter().map(|v| v / rs).collect());
        keep.push(j);
    }
    keep
}

fn mean_var(it: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = it.clone().count() as f64;
    let mean = it.clone().sum::<f64>() / n;
    let var = if n > 1.0 { it.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

fn draw_normals<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

/// `β̂ + scale · L z` with `V = L Lᵀ`.
fn perturb(beta: &[f64], v: &Matrix, scale: f64, z: &[f64], column: ColumnId) -> Result<Vec<f64>, MiceError> {
    if scale == 0.0 {
        return Ok(beta.to_vec());
    }
    let l = v.cholesky().ok_or(MiceError::Fit { column, source: GlmError::SingularDesign })?;
    Ok((0..beta.len())
        .map(|i| beta[i] + scale * (0..=i).map(|k| l.get(i, k) * z[k]).sum::<f64>())
        .collect())
}

/// Predictive mean matching for one column.
///
/// Fits a Bayesian linear regression on observed rows (σ² drawn from its
/// scaled inverse-χ² posterior, coefficients from `N(β̂, σ²(XᵀX)⁻¹)`), then
/// for every masked row copies the value of a donor picked uniformly among
/// the `donors` observed rows whose `β̂`-predicted mean is closest to the
/// row's `β*`-predicted mean. Ties between donors are broken at random.
///
/// `predictors` excludes the intercept. Returns the column with masked cells
/// filled; observed cells are returned unchanged.
pub fn pmm_impute_column<R: Rng + ?Sized>(
    values: &[f64],
    missing: &[bool],
    predictors: &Matrix,
    donors: usize,
    rng: &mut R,
) -> Result<Vec<f64>, MiceError> {
    pmm_impute_named(values, missing, predictors, donors, rng, ColumnId::Zps)
}

fn pmm_impute_named<R: Rng + ?Sized>(
    values: &[f64],
    missing: &[bool],
    predictors: &Matrix,
    donors: usize,
    rng: &mut R,
    column: ColumnId,
) -> Result<Vec<f64>, MiceError> {
    let n = values.len();
    let obs: Vec<usize> = (0..n).filter(|&i| !missing[i]).collect();
    let mis: Vec<usize> = (0..n).filter(|&i| missing[i]).collect();
    if mis.is_empty() {
        return Ok(values.to_vec());
    }
    if obs.is_empty() {
        return Err(MiceError::Degenerate { column, reason: "no observed donors".into() });
    }
    let cols: Vec<&[f64]> = (0..predictors.ncols()).map(|j| predictors.col(j)).collect();
    let x = Matrix::with_intercept(&cols);
    let p = x.ncols();
    let xo = x.select_rows(&obs);
    let yo: Vec<f64> = obs.iter().map(|&i| values[i]).collect();
    if obs.len() < p {
        return Err(MiceError::Fit { column, source: GlmError::TooFewRows { rows: obs.len(), cols: p } });
    }
    let l = xo.gram(None).cholesky().ok_or(MiceError::Fit { column, source: GlmError::SingularDesign })?;
    let beta_hat = crate::matrix::cholesky_solve(&l, &xo.tr_mul_vec(&yo));
    let v = crate::matrix::cholesky_inverse(&l);
    let fitted_obs = xo.mul_vec(&beta_hat);
    let rss: f64 = yo.iter().zip(&fitted_obs).map(|(y, f)| (y - f) * (y - f)).sum();
    let df = (obs.len().saturating_sub(p)).max(1) as f64;
    let chi: f64 = ChiSquared::new(df).expect("positive degrees of freedom").sample(rng);
    let sigma_star = (rss / chi).sqrt();
    let z = draw_normals(rng, p);
    let beta_star = perturb(&beta_hat, &v, sigma_star, &z, column)?;

    let targets: Vec<f64> = mis.iter().map(|&i| x.row_dot(i, &beta_star)).collect();
    let picks = match_donors(&fitted_obs, &targets, donors.min(obs.len()), rng);
    let mut out = values.to_vec();
    for (&i, &k) in mis.iter().zip(&picks) {
        out[i] = yo[k];
    }
    Ok(out)
}

/// For each target, the position (into `candidates`) of a donor drawn
/// uniformly from the `k` candidates nearest to it.
fn match_donors<R: Rng + ?Sized>(candidates: &[f64], targets: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| candidates[a].total_cmp(&candidates[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| candidates[i]).collect();
    let n = sorted.len();
    targets
        .iter()
        .map(|&t| {
            let mut r = sorted.partition_point(|&v| v < t);
            let mut l = r; // window is [l, r)
            while r - l < k {
                let take_left = if l == 0 {
                    false
                } else if r == n {
                    true
                } else {
                    t - sorted[l - 1] < sorted[r] - t
                };
                if take_left {
                    l -= 1;
                } else {
                    r += 1;
                }
            }
            order[l + rng.random_range(0..k)]
        })
        .collect()
}

/// Pseudo-observations that keep logistic imputation models finite under
/// separation: for each predictor, rows at its mean ± half a standard
/// deviation (clamped to the observed range) with every other predictor at
/// its mean, once per outcome class, sharing a total weight of `q + 1`.
fn augmentation(x: &Matrix) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
    let q = x.ncols();
    let stats: Vec<(f64, f64, f64, f64)> = (0..q)
        .map(|j| {
            let c = x.col(j);
            let (m, v) = mean_var(c.iter().copied());
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (m, v.sqrt(), lo, hi)
        })
        .collect();
    let mut rows = Vec::with_capacity(4 * q);
    let mut ys = Vec::with_capacity(4 * q);
    for j in 0..q {
        for class in [0.0, 1.0] {
            for sign in [0.5, -0.5] {
                let mut r: Vec<f64> = stats.iter().map(|s| s.0).collect();
                let (m, sd, lo, hi) = stats[j];
                r[j] = (m + sign * sd).clamp(lo, hi);
                rows.push(r);
                ys.push(class);
            }
        }
    }
    let weight = (q + 1) as f64 / (4 * q) as f64;
    (rows, ys, weight)
}

/// Bayesian logistic imputation of a binary column.
///
/// Fits the logistic model on observed rows (plus weighted pseudo-rows that
/// keep the fit finite under separation), draws `β*` from the normal
/// approximation `N(β̂, V̂)` and fills each masked row with a
/// `Bernoulli(expit(xᵀβ*))` draw.
pub fn logreg_impute_column<R: Rng + ?Sized>(
    values: &[f64],
    missing: &[bool],
    predictors: &Matrix,
    rng: &mut R,
) -> Result<Vec<f64>, MiceError> {
    let column = ColumnId::X2;
    let n = values.len();
    let obs: Vec<usize> = (0..n).filter(|&i| !missing[i]).collect();
    let mis: Vec<usize> = (0..n).filter(|&i| missing[i]).collect();
    if mis.is_empty() {
        return Ok(values.to_vec());
    }
    let ones = obs.iter().filter(|&&i| values[i] == 1.0).count();
    if ones == 0 || ones == obs.len() {
        return Err(MiceError::Degenerate { column, reason: "observed rows hold a single class".into() });
    }
    let q = predictors.ncols();
    let mut rows: Vec<Vec<f64>> = obs.iter().map(|&i| predictors.row(i)).collect();
    let mut y: Vec<f64> = obs.iter().map(|&i| values[i]).collect();
    let mut w = vec![1.0; obs.len()];
    if q > 0 && mis.len() > 1 {
        let (aug, ya, wa) = augmentation(predictors);
        rows.extend(aug);
        y.extend(ya);
        w.resize(y.len(), wa);
    }
    let design = {
        let body = Matrix::from_rows(&rows);
        let cols: Vec<&[f64]> = (0..q).map(|j| body.col(j)).collect();
        if q == 0 {
            Matrix::from_columns(&[vec![1.0; rows.len()]])
        } else {
            Matrix::with_intercept(&cols)
        }
    };
    let fit = glm::fit_logistic_weighted(&design, &y, &w).map_err(|source| MiceError::Fit { column, source })?;
    let z = draw_normals(rng, fit.coefficients.len());
    let beta_star = perturb(&fit.coefficients, &fit.covariance_model, 1.0, &z, column)?;

    let mut out = values.to_vec();
    for &i in &mis {
        let mut eta = beta_star[0];
        for j in 0..q {
            eta += beta_star[j + 1] * predictors.get(i, j);
        }
        let u: f64 = rng.random();
        out[i] = if u <= expit(eta) { 1.0 } else { 0.0 };
    }
    Ok(out)
}

struct ChainOutput {
    x2: Vec<f64>,
    zps: Vec<f64>,
    ps: Option<Vec<f64>>,
}

fn run_chain(base: &Frame, spec: &ImputationSpec, rng: &mut SimRng) -> Result<ChainOutput, MiceError> {
    let mut f = base.clone();
    let n = f.n();

    // start masked cells from the observed marginal
    for plan in &spec.columns {
        if plan.method == ImputeMethod::PassiveDerivePs {
            continue;
        }
        let c = plan.column.slot();
        let observed: Vec<f64> = (0..n).filter(|&i| !f.missing[c][i]).map(|i| f.values[c][i]).collect();
        if f.missing[c].iter().any(|&m| m) {
            if observed.is_empty() {
                return Err(MiceError::Degenerate { column: plan.column, reason: "no observed values".into() });
            }
            for i in 0..n {
                if f.missing[c][i] {
                    f.values[c][i] = observed[rng.random_range(0..observed.len())];
                }
            }
        }
    }
    // the mask stays attached to the frame; values now complete
    if spec.has_passive() {
        f.derive_ps()?;
    }

    for _ in 0..spec.maxit {
        for plan in &spec.columns {
            if plan.method == ImputeMethod::PassiveDerivePs {
                f.derive_ps()?;
                continue;
            }
            if f.n_missing(plan.column) == 0 {
                continue;
            }
            let all = f.predictors(&plan.predictors);
            let target = f.col(plan.column).to_vec();
            let mask = f.mask(plan.column).to_vec();
            let keep = usable_predictors(&all, &target, &mask);
            let x = all.select_columns(&keep);
            let filled = match plan.method {
                ImputeMethod::Pmm => pmm_impute_named(&target, &mask, &x, spec.pmm_donors, rng, plan.column)?,
                ImputeMethod::Logreg => logreg_impute_column(&target, &mask, &x, rng)?,
                ImputeMethod::PassiveDerivePs => unreachable!(),
            };
            f.values[plan.column.slot()] = filled;
        }
    }

    Ok(ChainOutput {
        x2: f.col(ColumnId::X2).to_vec(),
        zps: f.col(ColumnId::Zps).to_vec(),
        ps: spec.active_ps.then(|| f.col(ColumnId::Ps).to_vec()),
    })
}

/// Runs `spec.m` independent chains; chain `k` draws only from
/// `key.derive(CHAIN, k)`.
pub fn multiple_impute(d: &Dataset, spec: &ImputationSpec, key: StreamKey) -> Result<ImputedStack, MiceError> {
    spec.validate()?;
    let planned = |c: ColumnId| spec.columns.iter().any(|p| p.column == c && p.method != ImputeMethod::PassiveDerivePs);
    let used = |c: ColumnId| {
        spec.columns.iter().any(|p| p.predictors.contains(&c))
            || (c == ColumnId::X2 && (spec.has_passive() || spec.active_ps))
    };
    let x2_masked = d.x2.iter().any(Option::is_none);
    let zps_masked = d.zps.iter().any(Option::is_none);
    // a masked column nobody reads may stay masked
    for (c, masked) in [(ColumnId::X2, x2_masked), (ColumnId::Zps, zps_masked)] {
        if masked && !planned(c) && used(c) {
            return Err(MiceError::UnplannedColumn(c));
        }
    }
    let x2_masked = x2_masked && planned(ColumnId::X2);
    let zps_masked = zps_masked && planned(ColumnId::Zps);
    if !x2_masked && !zps_masked {
        return Ok(ImputedStack::identical(d, spec));
    }

    let base = frame_from(d, spec.active_ps)?;
    let outputs: Vec<Result<ChainOutput, MiceError>> = (0..spec.m)
        .into_par_iter()
        .map(|k| run_chain(&base, spec, &mut key.derive(stage::CHAIN, k as u64).rng()))
        .collect();

    let mut completions = Vec::with_capacity(spec.m);
    let mut imputed_ps = Vec::new();
    for (chain, out) in outputs.into_iter().enumerate() {
        let out = out.map_err(|e| MiceError::Chain { chain, source: Box::new(e) })?;
        let mut c = d.clone();
        for i in 0..c.len() {
            if x2_masked && c.x2[i].is_none() {
                c.x2[i] = Some(out.x2[i] as u8);
            }
            if zps_masked && c.zps[i].is_none() {
                c.zps[i] = Some(out.zps[i]);
            }
        }
        completions.push(c);
        if let Some(ps) = out.ps {
            imputed_ps.push(ps);
        }
    }
    Ok(ImputedStack {
        completions,
        ps: Vec::new(),
        ps_coefficients: Vec::new(),
        imputed_ps: spec.active_ps.then_some(imputed_ps),
        x2_missing: d.x2_missing(),
        provenance: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GenerativeParams};
    use crate::missingness::{induce_missingness, MdmSpec};

    fn x2_plan() -> Vec<ColumnPlan> {
        vec![ColumnPlan::new(ColumnId::X2, ImputeMethod::Logreg, &[ColumnId::X1, ColumnId::T, ColumnId::Y])]
    }

    #[test]
    fn single_donor_value_is_copied() {
        let vals = vec![4.0, f64::NAN, 4.0, f64::NAN, 4.0];
        let miss = vec![false, true, false, true, false];
        let x = Matrix::from_columns(&[vec![0.0, 1.0, 2.0, 3.0, 4.0]]);
        let out = pmm_impute_column(&vals, &miss, &x, 5, &mut StreamKey::root(1).rng()).unwrap();
        assert!(out.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn donor_window_picks_nearest() {
        let cands = [0.0, 1.0, 2.0, 10.0, 11.0];
        let mut rng = StreamKey::root(2).rng();
        for _ in 0..20 {
            let picks = match_donors(&cands, &[10.4, -5.0, 100.0], 2, &mut rng);
            assert!(picks[0] == 3 || picks[0] == 4);
            assert!(picks[1] == 0 || picks[1] == 1);
            assert!(picks[2] == 3 || picks[2] == 4);
        }
    }

    #[test]
    fn single_class_logreg_is_error() {
        let vals = vec![1.0, 1.0, f64::NAN, 1.0];
        let miss = vec![false, false, true, false];
        let x = Matrix::from_columns(&[vec![0.0, 1.0, 2.0, 3.0]]);
        let err = logreg_impute_column(&vals, &miss, &x, &mut StreamKey::root(1).rng()).unwrap_err();
        assert!(matches!(err, MiceError::Degenerate { .. }));
    }

    #[test]
    fn nothing_masked_gives_identical_copies() {
        let d = generate_dataset(&GenerativeParams { n: 300, ..Default::default() }, &mut StreamKey::root(3).rng()).unwrap();
        let spec = ImputationSpec { m: 4, columns: x2_plan(), ..Default::default() };
        let stack = multiple_impute(&d, &spec, StreamKey::root(4)).unwrap();
        assert_eq!(stack.m(), 4);
        assert!(stack.completions.iter().all(|c| c == &d));
    }

    #[test]
    fn unplanned_mask_is_rejected() {
        let d = generate_dataset(&GenerativeParams { n: 300, ..Default::default() }, &mut StreamKey::root(3).rng()).unwrap();
        let d = induce_missingness(&d, &MdmSpec::default(), &mut StreamKey::root(5).rng()).unwrap();
        let spec = ImputationSpec {
            m: 2,
            columns: vec![ColumnPlan::new(ColumnId::Zps, ImputeMethod::Pmm, &[ColumnId::X2, ColumnId::Y])],
            ..Default::default()
        };
        assert_eq!(multiple_impute(&d, &spec, StreamKey::root(4)).unwrap_err(), MiceError::UnplannedColumn(ColumnId::X2));
    }

    #[test]
    fn spec_validation() {
        let mut spec = ImputationSpec { m: 1, columns: x2_plan(), ..Default::default() };
        assert!(spec.validate().is_err());
        spec.m = 2;
        spec.validate().unwrap();
        spec.columns[0].predictors.push(ColumnId::X2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn collinear_predictor_is_dropped() {
        let a: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
        let c: Vec<f64> = (0..50).map(|i| ((i * 13) % 11) as f64).collect();
        let y: Vec<f64> = (0..50).map(|i| ((i * 5) % 9) as f64).collect();
        let x = Matrix::from_columns(&[a, b, vec![3.0; 50], c]);
        assert_eq!(usable_predictors(&x, &y, &vec![false; 50]), vec![0, 3]);
    }
}
