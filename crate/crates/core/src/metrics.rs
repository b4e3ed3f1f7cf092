//! Performance summaries over simulation replicates with Monte Carlo SEs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psm::BalanceReport;

/// Normal quantile used for Wald intervals.
pub const Z_975: f64 = 1.96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("estimates and standard errors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("truth must be finite")]
    NonFiniteTruth,
    #[error("reference MSE must be positive, got {0}")]
    NonPositiveReference(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// Fraction of replicates whose own interval covers the truth.
    #[default]
    PerReplicate,
    /// Single interval from the mean estimate and the root mean variance.
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub strategy_id: String,
    pub bias: f64,
    pub bias_mcse: f64,
    pub empirical_se: f64,
    pub empirical_se_mcse: f64,
    /// Root of the mean model variance.
    pub mean_model_se: f64,
    pub mse: f64,
    pub mse_mcse: f64,
    pub rmse_relative: Option<f64>,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub coverage_mode: CoverageMode,
    pub pct_matched_mean: Option<f64>,
    pub balance: Option<BalanceReport>,
    pub n_replicates: usize,
    pub n_failed: usize,
}

/// Sorted copy; reductions over sorted data make the result independent of
/// replicate order.
fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn mean(v: &[f64]) -> f64 {
    sorted(v).iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    let dev: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    sorted(&dev).iter().sum::<f64>() / (v.len() - 1) as f64
}

/// Bias, empirical SE, MSE, relative MSE and coverage with their Monte Carlo
/// standard errors. Entries of `ses` that are not finite and positive count
/// as non-covering.
pub fn summarize(
    strategy_id: &str,
    estimates: &[f64],
    ses: &[f64],
    truth: f64,
    reference_mse: Option<f64>,
    mode: CoverageMode,
) -> Result<MetricsSummary, MetricsError> {
    let k = estimates.len();
    if k < 2 {
        return Err(MetricsError::TooFewReplicates(k));
    }
    if ses.len() != k {
        return Err(MetricsError::LengthMismatch(k, ses.len()));
    }
    if !truth.is_finite() {
        return Err(MetricsError::NonFiniteTruth);
    }
    if let Some(r) = reference_mse {
        if !(r > 0.0) {
            return Err(MetricsError::NonPositiveReference(r));
        }
    }
    let kf = k as f64;
    let est_mean = mean(estimates);
    let sd = sample_var(estimates).sqrt();
    let sq_err: Vec<f64> = estimates.iter().map(|e| (e - truth) * (e - truth)).collect();
    let mse = mean(&sq_err);
    let mse_sd = sample_var(&sq_err).sqrt();
    let var_mean = mean(&ses.iter().map(|s| s * s).collect::<Vec<_>>());

    let coverage = match mode {
        CoverageMode::PerReplicate => {
            let hits = estimates
                .iter()
                .zip(ses)
                .filter(|(e, s)| s.is_finite() && **s > 0.0 && (*e - truth).abs() <= Z_975 * **s)
                .count();
            hits as f64 / kf
        }
        CoverageMode::Approximate => {
            let s = var_mean.sqrt();
            if s.is_finite() && (est_mean - truth).abs() <= Z_975 * s {
                1.0
            } else {
                0.0
            }
        }
    };

    Ok(MetricsSummary {
        strategy_id: strategy_id.to_string(),
        bias: est_mean - truth,
        bias_mcse: sd / kf.sqrt(),
        empirical_se: sd,
        empirical_se_mcse: sd / (2.0 * (kf - 1.0)).sqrt(),
        mean_model_se: var_mean.sqrt(),
        mse,
        mse_mcse: mse_sd / kf.sqrt(),
        rmse_relative: reference_mse.map(|r| mse / r),
        coverage,
        coverage_mcse: (coverage * (1.0 - coverage) / kf).sqrt(),
        coverage_mode: mode,
        pct_matched_mean: None,
        balance: None,
        n_replicates: k,
        n_failed: 0,
    })
}

/// Mean of a per-replicate quantity, order independent.
pub fn order_free_mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| mean(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mcse_formulas_reproduce_reference_parentheticals() {
        let k = 1000.0_f64;
        let sd = 0.376;
        assert!((sd / k.sqrt() - 0.012).abs() < 0.001);
        assert!((sd / (2.0 * (k - 1.0)).sqrt() - 0.008).abs() < 0.001);
        let c = 0.957;
        assert!(((c * (1.0 - c) / k).sqrt() - 0.006).abs() < 0.001);
    }

    #[test]
    fn summary_mcse_fields_match_formulas() {
        let est: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 2.376 } else { 1.624 }).collect();
        let s = summarize("x", &est, &vec![0.38; 1000], 2.0, None, CoverageMode::PerReplicate).unwrap();
        let sd = s.empirical_se;
        assert!((s.bias_mcse - sd / 1000f64.sqrt()).abs() < 1e-15);
        assert!((s.empirical_se_mcse - sd / 1998f64.sqrt()).abs() < 1e-15);
        assert!((s.bias_mcse - 0.012).abs() < 0.001);
        assert!((s.empirical_se_mcse - 0.008).abs() < 0.001);
    }

    #[test]
    fn exact_estimates_have_no_error() {
        let s = summarize("x", &[2.0; 10], &[0.5; 10], 2.0, Some(1.0), CoverageMode::PerReplicate).unwrap();
        assert_eq!(s.bias, 0.0);
        assert_eq!(s.mse, 0.0);
        assert_eq!(s.coverage, 1.0);
        assert_eq!(s.rmse_relative, Some(0.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(summarize("x", &[1.0], &[1.0], 0.0, None, CoverageMode::PerReplicate).is_err());
        assert!(summarize("x", &[1.0, 2.0], &[1.0], 0.0, None, CoverageMode::PerReplicate).is_err());
        assert!(summarize("x", &[1.0, 2.0], &[1.0, 1.0], f64::NAN, None, CoverageMode::PerReplicate).is_err());
        assert!(summarize("x", &[1.0, 2.0], &[1.0, 1.0], 0.0, Some(0.0), CoverageMode::PerReplicate).is_err());
    }

    #[test]
    fn approximate_coverage_is_binary() {
        let s = summarize("x", &[1.0, 3.0], &[1.0, 1.0], 2.0, None, CoverageMode::Approximate).unwrap();
        assert_eq!(s.coverage, 1.0);
        let s = summarize("x", &[5.0, 5.0], &[1.0, 1.0], 2.0, None, CoverageMode::Approximate).unwrap();
        assert_eq!(s.coverage, 0.0);
    }

    proptest! {
        #[test]
        fn mse_decomposes(est in prop::collection::vec(-10.0f64..10.0, 2..60), truth in -5.0f64..5.0) {
            let ses = vec![1.0; est.len()];
            let s = summarize("x", &est, &ses, truth, None, CoverageMode::PerReplicate).unwrap();
            let k = est.len() as f64;
            let rhs = s.bias * s.bias + s.empirical_se * s.empirical_se * (k - 1.0) / k;
            prop_assert!((s.mse - rhs).abs() <= 1e-12 * (1.0 + s.mse));
            prop_assert!((0.0..=1.0).contains(&s.coverage));
            prop_assert!(s.mse >= s.bias * s.bias - 3.0 * s.mse_mcse - 1e-12);
        }

        #[test]
        fn self_reference_is_one(est in prop::collection::vec(-10.0f64..10.0, 2..40), truth in -5.0f64..5.0) {
            let ses = vec![1.0; est.len()];
            let base = summarize("x", &est, &ses, truth, None, CoverageMode::PerReplicate).unwrap();
            prop_assume!(base.mse > 0.0);
            let s = summarize("x", &est, &ses, truth, Some(base.mse), CoverageMode::PerReplicate).unwrap();
            prop_assert_eq!(s.rmse_relative, Some(1.0));
        }

        #[test]
        fn permutation_invariant(est in prop::collection::vec(-10.0f64..10.0, 2..40), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let ses: Vec<f64> = est.iter().map(|e| 0.5 + e.abs() * 0.1).collect();
            let mut idx: Vec<usize> = (0..est.len()).collect();
            idx.shuffle(&mut crate::rng::StreamKey::root(seed).rng());
            let e2: Vec<f64> = idx.iter().map(|&i| est[i]).collect();
            let s2: Vec<f64> = idx.iter().map(|&i| ses[i]).collect();
            let a = summarize("x", &est, &ses, 1.0, Some(2.0), CoverageMode::PerReplicate).unwrap();
            let b = summarize("x", &e2, &s2, 1.0, Some(2.0), CoverageMode::PerReplicate).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
