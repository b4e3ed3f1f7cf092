//! Missing-data strategies for propensity-score matching.
//!
//! Common methods (full data, complete cases, complete variables, mean
//! imputation, missing indicator) and the multiple-imputation grid: four ways
//! to obtain the propensity score from imputed data crossed with three ways
//! to integrate the `m` completions into one matched analysis.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{as_f64, Dataset};
use crate::glm::expit;
use crate::mice::{self, ColumnId, ColumnPlan, ImputationSpec, ImputeMethod, ImputedStack, MiceError};
use crate::psm::{
    self, matched_std_diff, Adjustment, BalanceReport, BalanceSlice, Covariate, EffectEstimate, MatchedSample, PsmError,
    SeKind,
};
use crate::rng::{stage, StreamKey};

/// Bootstrap resamples above this failure share make the estimate unusable.
pub const MAX_BOOTSTRAP_FAILURE_SHARE: f64 = 0.10;
/// Complete-case analysis needs at least this many complete treated rows.
pub const MIN_CC_TREATED: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("invalid strategy: {0}")]
    InvalidSpec(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("imputation failed: {0}")]
    Imputation(#[from] MiceError),
    #[error(transparent)]
    Psm(#[from] PsmError),
    #[error("completion {completion}: {source}")]
    Integration { completion: usize, source: PsmError },
    #[error("{failed} of {total} bootstrap resamples failed")]
    BootstrapFailures { failed: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    FullData,
    Cc,
    Cva,
    MeanImputation,
    MissingIndicator,
    Mi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MiImputation {
    #[serde(rename = "derPassive")]
    DerPassive,
    #[serde(rename = "regPassive")]
    RegPassive,
    #[serde(rename = "regActive")]
    RegActive,
    #[serde(rename = "redActive")]
    RedActive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiIntegration {
    Within,
    Across,
    Across2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxChoice {
    None,
    Z2,
    Zps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationOrder {
    /// `x2` before `zps`.
    Default,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    RobustCluster,
    Bootstrap,
    Both,
}

impl VarianceMethod {
    pub fn wants_bootstrap(self) -> bool {
        matches!(self, VarianceMethod::Bootstrap | VarianceMethod::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: MethodKind,
    pub mi_imputation: Option<MiImputation>,
    pub mi_integration: Option<MiIntegration>,
    pub include_aux: AuxChoice,
    pub imputation_order: ImputationOrder,
    pub adjust: Adjustment,
    pub variance: VarianceMethod,
    pub m: usize,
    pub maxit: usize,
    /// Bootstrap resamples.
    pub bootstrap_reps: usize,
    /// Imputations inside each bootstrap resample; `None` reuses `m`.
    pub bootstrap_m: Option<usize>,
    pub pmm_donors: usize,
}

impl StrategySpec {
    pub fn common(kind: MethodKind) -> Self {
        StrategySpec {
            kind,
            mi_imputation: None,
            mi_integration: None,
            include_aux: AuxChoice::None,
            imputation_order: ImputationOrder::Default,
            adjust: Adjustment::Adjusted,
            variance: VarianceMethod::RobustCluster,
            m: 50,
            maxit: 5,
            bootstrap_reps: 200,
            bootstrap_m: None,
            pmm_donors: 5,
        }
    }

    pub fn mi(imputation: MiImputation, integration: MiIntegration) -> Self {
        StrategySpec { mi_imputation: Some(imputation), mi_integration: Some(integration), ..Self::common(MethodKind::Mi) }
    }

    pub fn with_aux(mut self, aux: AuxChoice) -> Self {
        self.include_aux = aux;
        self
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        let bad = |m: &str| Err(StrategyError::InvalidSpec(m.to_string()));
        if self.kind == MethodKind::Mi {
            let (Some(imp), Some(int)) = (self.mi_imputation, self.mi_integration) else {
                return bad("MI strategies need an imputation and an integration mode");
            };
            if imp == MiImputation::RegActive && int == MiIntegration::Across2 {
                return bad("regActive cannot be combined with across2 integration");
            }
            if imp == MiImputation::RegPassive && self.include_aux != AuxChoice::Zps {
                return bad("regPassive needs zps as its auxiliary variable");
            }
            if self.m < 2 || self.bootstrap_m.is_some_and(|m| m < 2) {
                return bad("m must be at least 2");
            }
            if self.maxit < 1 {
                return bad("maxit must be at least 1");
            }
            if self.pmm_donors < 1 {
                return bad("pmm_donors must be at least 1");
            }
        } else if self.mi_imputation.is_some() || self.mi_integration.is_some() {
            return bad("imputation/integration modes only apply to MI strategies");
        }
        if self.variance.wants_bootstrap() && self.bootstrap_reps < 2 {
            return bad("bootstrap needs at least 2 resamples");
        }
        Ok(())
    }

    /// Copy used inside bootstrap resamples.
    fn for_resample(&self) -> StrategySpec {
        StrategySpec { m: self.bootstrap_m.unwrap_or(self.m), variance: VarianceMethod::RobustCluster, ..self.clone() }
    }
}

impl fmt::Display for MiImputation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiImputation::DerPassive => "derPassive",
            MiImputation::RegPassive => "regPassive",
            MiImputation::RegActive => "regActive",
            MiImputation::RedActive => "redActive",
        })
    }
}

impl fmt::Display for MiIntegration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiIntegration::Within => "within",
            MiIntegration::Across => "across",
            MiIntegration::Across2 => "across2",
        })
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodKind::FullData => "full_data",
            MethodKind::Cc => "cc",
            MethodKind::Cva => "cva",
            MethodKind::MeanImputation => "mean_imputation",
            MethodKind::MissingIndicator => "missing_indicator",
            MethodKind::Mi => "mi",
        })
    }
}

/// Canonical identifier: `cc`, `mi:derPassive:across:z2:reverse`, … Only the
/// fields that shape the point estimate are encoded (plus `unadjusted`).
impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let (Some(i), Some(g)) = (self.mi_imputation, self.mi_integration) {
            write!(f, ":{i}:{g}")?;
        }
        match self.include_aux {
            AuxChoice::None => {}
            AuxChoice::Z2 => f.write_str(":z2")?,
            AuxChoice::Zps => f.write_str(":zps")?,
        }
        if self.imputation_order == ImputationOrder::Reverse {
            f.write_str(":reverse")?;
        }
        if self.adjust == Adjustment::Unadjusted {
            f.write_str(":unadjusted")?;
        }
        Ok(())
    }
}

impl FromStr for StrategySpec {
    type Err = StrategyError;

    /// Parses the identifier format produced by `Display`; counts and the
    /// variance method take their defaults.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StrategyError::InvalidSpec(format!("cannot parse strategy {s:?}"));
        let mut parts = s.split(':');
        let head = parts.next().ok_or_else(bad)?;
        let mut spec = match head {
            "full_data" => StrategySpec::common(MethodKind::FullData),
            "cc" => StrategySpec::common(MethodKind::Cc),
            "cva" => StrategySpec::common(MethodKind::Cva),
            "mean_imputation" => StrategySpec::common(MethodKind::MeanImputation),
            "missing_indicator" => StrategySpec::common(MethodKind::MissingIndicator),
            "mi" => {
                let imp = match parts.next().ok_or_else(bad)? {
                    "derPassive" => MiImputation::DerPassive,
                    "regPassive" => MiImputation::RegPassive,
                    "regActive" => MiImputation::RegActive,
                    "redActive" => MiImputation::RedActive,
                    _ => return Err(bad()),
                };
                let int = match parts.next().ok_or_else(bad)? {
                    "within" => MiIntegration::Within,
                    "across" => MiIntegration::Across,
                    "across2" => MiIntegration::Across2,
                    _ => return Err(bad()),
                };
                StrategySpec::mi(imp, int)
            }
            _ => return Err(bad()),
        };
        for p in parts {
            match p {
                "z2" => spec.include_aux = AuxChoice::Z2,
                "zps" => spec.include_aux = AuxChoice::Zps,
                "reverse" => spec.imputation_order = ImputationOrder::Reverse,
                "unadjusted" => spec.adjust = Adjustment::Unadjusted,
                _ => return Err(bad()),
            }
        }
        Ok(spec)
    }
}

/// Point estimate plus every standard error that was computed.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    pub estimate: EffectEstimate,
    pub se_robust: Option<f64>,
    pub se_bootstrap: Option<f64>,
    pub bootstrap_failures: usize,
}

/// Runs a strategy with the variance estimators its spec asks for.
pub fn run_strategy(d: &Dataset, spec: &StrategySpec, key: StreamKey) -> Result<StrategyResult, StrategyError> {
    spec.validate()?;
    let mut estimate = point_estimate(d, spec, key)?;
    let se_robust = estimate.se;
    let mut se_bootstrap = None;
    let mut bootstrap_failures = 0;
    if spec.variance.wants_bootstrap() {
        let b = bootstrap_variance(d, spec, spec.bootstrap_reps, key.derive(stage::BOOTSTRAP, 0))?;
        se_bootstrap = Some(b.se);
        bootstrap_failures = b.n_failed;
        estimate.se = Some(b.se);
        estimate.se_kind = SeKind::Bootstrap;
    }
    Ok(StrategyResult { estimate, se_robust, se_bootstrap, bootstrap_failures })
}

fn point_estimate(d: &Dataset, spec: &StrategySpec, key: StreamKey) -> Result<EffectEstimate, StrategyError> {
    match spec.kind {
        MethodKind::Mi => run_mi_strategy(d, spec, key),
        _ => run_common_method(d, spec, key),
    }
}

/// Propensity fit, caliper matching and outcome regression on one analysis
/// dataset, with a cluster-robust SE.
struct Analysis {
    sample: MatchedSample,
    att: f64,
    se: f64,
    n_pairs: usize,
}

fn analyse(
    y: &[f64],
    t: &[f64],
    ps: &[f64],
    outcome_covs: &[&[f64]],
    adjust: Adjustment,
    key: StreamKey,
) -> Result<Analysis, PsmError> {
    let sample = psm::match_caliper_nn(ps, t, &mut key.rng())?;
    let fit = psm::estimate_att(y, t, outcome_covs, &sample, adjust)?;
    let se = fit.robust_se()?;
    Ok(Analysis { att: fit.att, se, n_pairs: fit.n_pairs, sample })
}

/// Full data, complete cases, complete variables, mean imputation or missing
/// indicator. The SE is cluster-robust with matched pairs as clusters.
pub fn run_common_method(d: &Dataset, spec: &StrategySpec, key: StreamKey) -> Result<EffectEstimate, StrategyError> {
    let mkey = key.derive(stage::MATCHING, 0);
    let adjust = spec.adjust;
    let mut balance = BalanceReport::default();

    let (a, balance) = match spec.kind {
        MethodKind::FullData => {
            let (x1, x2, t) = (d.x1_f64(), d.x2_true_f64(), d.t_f64());
            let (ps, _) = psm::estimate_ps(&x1, &x2, &t)?;
            let a = analyse(&d.y, &t, &ps, &[&x1, &x2], adjust, mkey)?;
            balance.insert(Covariate::X1, BalanceSlice::FullData, matched_std_diff(&x1, &t, &a.sample, None));
            balance.insert(Covariate::X2, BalanceSlice::FullData, matched_std_diff(&x2, &t, &a.sample, None));
            (a, balance)
        }
        MethodKind::Cc => {
            let rows: Vec<usize> = (0..d.len()).filter(|&i| d.x2[i].is_some()).collect();
            let cc = d.select(&rows);
            let treated = cc.n_treated();
            if treated < MIN_CC_TREATED {
                return Err(StrategyError::InsufficientData(format!("{treated} complete treated rows")));
            }
            let (x1, x2, t) = (cc.x1_f64(), cc.x2_true_f64(), cc.t_f64());
            let (ps, _) = psm::estimate_ps(&x1, &x2, &t)?;
            let a = analyse(&cc.y, &t, &ps, &[&x1, &x2], adjust, mkey)?;
            balance.insert(Covariate::X1, BalanceSlice::FullData, matched_std_diff(&x1, &t, &a.sample, None));
            balance.insert(Covariate::X2, BalanceSlice::FullData, matched_std_diff(&x2, &t, &a.sample, None));
            (a, balance)
        }
        MethodKind::Cva => {
            let (x1, t) = (d.x1_f64(), d.t_f64());
            let ps = psm::fit_propensity(&[&x1], &t)?.ps;
            let a = analyse(&d.y, &t, &ps, &[&x1], adjust, mkey)?;
            balance.insert(Covariate::X1, BalanceSlice::FullData, matched_std_diff(&x1, &t, &a.sample, None));
            balance.insert(Covariate::X2, BalanceSlice::FullData, matched_std_diff(&d.x2_true_f64(), &t, &a.sample, None));
            (a, balance)
        }
        MethodKind::MeanImputation => {
            let (x1, t) = (d.x1_f64(), d.t_f64());
            let observed: Vec<f64> = d.x2.iter().flatten().map(|&v| f64::from(v)).collect();
            if observed.is_empty() {
                return Err(StrategyError::InsufficientData("no observed x2".into()));
            }
            let fill = observed.iter().sum::<f64>() / observed.len() as f64;
            let x2: Vec<f64> = d.x2.iter().map(|v| v.map_or(fill, f64::from)).collect();
            let ps = psm::fit_propensity(&[&x1, &x2], &t)?.ps;
            let a = analyse(&d.y, &t, &ps, &[&x1, &x2], adjust, mkey)?;
            let x1d = matched_std_diff(&x1, &t, &a.sample, None);
            balance.insert(Covariate::X1, BalanceSlice::OriginalData, x1d);
            balance.insert(Covariate::X1, BalanceSlice::ImputedData, x1d);
            balance.insert(Covariate::X2, BalanceSlice::OriginalData, matched_std_diff(&d.x2_true_f64(), &t, &a.sample, None));
            balance.insert(Covariate::X2, BalanceSlice::ImputedData, matched_std_diff(&x2, &t, &a.sample, None));
            (a, balance)
        }
        MethodKind::MissingIndicator => {
            let (x1, t) = (d.x1_f64(), d.t_f64());
            let x2: Vec<f64> = d.x2.iter().map(|v| v.map_or(0.0, f64::from)).collect();
            let r2: Vec<f64> = d.x2.iter().map(|v| if v.is_none() { 1.0 } else { 0.0 }).collect();
            let ps = psm::fit_propensity(&[&x1, &x2, &r2], &t)?.ps;
            let a = analyse(&d.y, &t, &ps, &[&x1, &x2, &r2], adjust, mkey)?;
            let truth = d.x2_true_f64();
            let observed: Vec<bool> = r2.iter().map(|&r| r == 0.0).collect();
            let missing: Vec<bool> = r2.iter().map(|&r| r == 1.0).collect();
            let x1d = matched_std_diff(&x1, &t, &a.sample, None);
            balance.insert(Covariate::X1, BalanceSlice::ImputedData, x1d);
            balance.insert(Covariate::X1, BalanceSlice::FullData, x1d);
            balance.insert(Covariate::X1, BalanceSlice::ObservedPart, matched_std_diff(&x1, &t, &a.sample, Some(&observed)));
            balance.insert(Covariate::X1, BalanceSlice::MissingPart, matched_std_diff(&x1, &t, &a.sample, Some(&missing)));
            balance.insert(Covariate::X2, BalanceSlice::ImputedData, matched_std_diff(&x2, &t, &a.sample, None));
            balance.insert(Covariate::X2, BalanceSlice::FullData, matched_std_diff(&truth, &t, &a.sample, None));
            balance.insert(Covariate::X2, BalanceSlice::ObservedPart, matched_std_diff(&truth, &t, &a.sample, Some(&observed)));
            balance.insert(Covariate::X2, BalanceSlice::MissingPart, matched_std_diff(&truth, &t, &a.sample, Some(&missing)));
            (a, balance)
        }
        MethodKind::Mi => return Err(StrategyError::InvalidSpec("MI strategy passed to run_common_method".into())),
    };
    let mut balance = balance;
    balance.pct_treated_matched = a.sample.pct_treated_matched();
    Ok(EffectEstimate { att: a.att, se: Some(a.se), se_kind: SeKind::RobustCluster, n_pairs: a.n_pairs, diagnostics: balance })
}

/// Imputation models for a strategy, by missing column.
pub fn imputation_spec(spec: &StrategySpec) -> Result<ImputationSpec, StrategyError> {
    use ColumnId::*;
    let imp = spec.mi_imputation.ok_or_else(|| StrategyError::InvalidSpec("not an MI strategy".into()))?;
    let aux: Option<ColumnId> = match spec.include_aux {
        AuxChoice::None => None,
        AuxChoice::Z2 => Some(Z2),
        AuxChoice::Zps => Some(Zps),
    };
    let with_aux = |base: &[ColumnId]| -> Vec<ColumnId> { base.iter().copied().chain(aux).collect() };
    let zps_plan = |extra: &[ColumnId]| -> Option<ColumnPlan> {
        (aux == Some(Zps)).then(|| {
            let preds: Vec<ColumnId> = [X1, X2, T, Y].iter().chain(extra).copied().collect();
            ColumnPlan::new(Zps, ImputeMethod::Pmm, &preds)
        })
    };
    let reverse = spec.imputation_order == ImputationOrder::Reverse;

    let mut columns = Vec::new();
    let active = matches!(imp, MiImputation::RegActive | MiImputation::RedActive);
    match imp {
        MiImputation::DerPassive => {
            let x2 = ColumnPlan::new(X2, ImputeMethod::Logreg, &with_aux(&[X1, T, Y]));
            let z = zps_plan(&[]);
            if reverse {
                columns.extend(z);
                columns.push(x2);
            } else {
                columns.push(x2);
                columns.extend(z);
            }
        }
        MiImputation::RegPassive => {
            let x2 = ColumnPlan::new(X2, ImputeMethod::Logreg, &with_aux(&[X1, T, Y]));
            let z = zps_plan(&[Ps]).expect("regPassive requires zps");
            if reverse {
                columns.extend([z, x2, ColumnPlan::derive_ps()]);
            } else {
                columns.extend([x2, ColumnPlan::derive_ps(), z]);
            }
        }
        MiImputation::RegActive | MiImputation::RedActive => {
            let x2 = ColumnPlan::new(X2, ImputeMethod::Logreg, &with_aux(&[X1, T, Y, Ps]));
            let ps = ColumnPlan::new(Ps, ImputeMethod::Pmm, &with_aux(&[X1, X2, T, Y]));
            let z = zps_plan(&[Ps]);
            if reverse {
                columns.extend(z);
                columns.extend([x2, ps]);
            } else {
                columns.extend([x2, ps]);
                columns.extend(z);
            }
        }
    }
    Ok(ImputationSpec { m: spec.m, maxit: spec.maxit, columns, pmm_donors: spec.pmm_donors, active_ps: active })
}

/// Imputes, fills the stack's propensity scores per the imputation strategy,
/// then integrates.
pub fn run_mi_strategy(d: &Dataset, spec: &StrategySpec, key: StreamKey) -> Result<EffectEstimate, StrategyError> {
    spec.validate()?;
    let (Some(imp), Some(mode)) = (spec.mi_imputation, spec.mi_integration) else {
        return Err(StrategyError::InvalidSpec("not an MI strategy".into()));
    };
    let ispec = imputation_spec(spec)?;
    let mut stack = mice::multiple_impute(d, &ispec, key.derive(stage::IMPUTATION, 0))?;
    populate_ps(&mut stack, imp)?;
    integrate(&stack, mode, spec.adjust, key)
}

/// Derived scores for passive and re-derived strategies; the imputed column
/// for `regActive`.
pub fn populate_ps(stack: &mut ImputedStack, imp: MiImputation) -> Result<(), StrategyError> {
    if imp == MiImputation::RegActive {
        if let Some(imputed) = &stack.imputed_ps {
            stack.ps = imputed.clone();
            stack.ps_coefficients.clear();
            return Ok(());
        }
        // nothing was masked: the complete-data score
    }
    let fits: Vec<Result<(Vec<f64>, [f64; 3]), PsmError>> = stack
        .completions
        .par_iter()
        .map(|c| {
            let x2: Vec<f64> = c.x2.iter().map(|v| v.map_or(f64::NAN, f64::from)).collect();
            psm::estimate_ps(&c.x1_f64(), &x2, &c.t_f64())
        })
        .collect();
    stack.ps.clear();
    stack.ps_coefficients.clear();
    for (k, f) in fits.into_iter().enumerate() {
        let (ps, coef) = f.map_err(|source| StrategyError::Integration { completion: k, source })?;
        stack.ps.push(ps);
        stack.ps_coefficients.push(coef.to_vec());
    }
    Ok(())
}

fn completed_x2(c: &Dataset) -> Vec<f64> {
    c.x2.iter().map(|v| v.map_or(f64::NAN, f64::from)).collect()
}

fn column_mean(cols: &[Vec<f64>]) -> Vec<f64> {
    let m = cols.len() as f64;
    let n = cols[0].len();
    (0..n).map(|i| cols.iter().map(|c| c[i]).sum::<f64>() / m).collect()
}

/// Combines the completions into one effect estimate.
///
/// * `Within`: match and estimate in every completion; Rubin-pool the ATTs
///   and their robust variances.
/// * `Across`: match once on the per-subject mean propensity score; the
///   outcome model uses covariates averaged across completions.
/// * `Across2`: average the propensity-model coefficients and the
///   covariates, score once, match once.
pub fn integrate(stack: &ImputedStack, mode: MiIntegration, adjust: Adjustment, key: StreamKey) -> Result<EffectEstimate, StrategyError> {
    let m = stack.m();
    if m == 0 || stack.ps.len() != m {
        return Err(StrategyError::InvalidSpec("stack propensity scores are not populated".into()));
    }
    let base = &stack.completions[0];
    let (x1, t, y, truth) = (base.x1_f64(), base.t_f64(), &base.y, base.x2_true_f64());

    match mode {
        MiIntegration::Within => {
            let per: Vec<Result<(Analysis, BalanceReport), StrategyError>> = (0..m)
                .into_par_iter()
                .map(|k| {
                    let x2 = completed_x2(&stack.completions[k]);
                    let a = analyse(y, &t, &stack.ps[k], &[&x1, &x2], adjust, key.derive(stage::MATCHING, k as u64))
                        .map_err(|source| StrategyError::Integration { completion: k, source })?;
                    let mut b = BalanceReport { pct_treated_matched: a.sample.pct_treated_matched(), ..Default::default() };
                    let x1d = matched_std_diff(&x1, &t, &a.sample, None);
                    b.insert(Covariate::X1, BalanceSlice::ImputedData, x1d);
                    b.insert(Covariate::X1, BalanceSlice::FullData, x1d);
                    b.insert(Covariate::X2, BalanceSlice::ImputedData, matched_std_diff(&x2, &t, &a.sample, None));
                    b.insert(Covariate::X2, BalanceSlice::FullData, matched_std_diff(&truth, &t, &a.sample, None));
                    Ok((a, b))
                })
                .collect();
            let mut atts = Vec::with_capacity(m);
            let mut vars = Vec::with_capacity(m);
            let mut pairs = 0usize;
            let mut reports = Vec::with_capacity(m);
            for r in per {
                let (a, b) = r?;
                atts.push(a.att);
                vars.push(a.se * a.se);
                pairs += a.n_pairs;
                reports.push(b);
            }
            let (att, total) = pool_rubin(&atts, &vars)?;
            Ok(EffectEstimate {
                att,
                se: Some(total.sqrt()),
                se_kind: SeKind::RubinPooled,
                n_pairs: (pairs as f64 / m as f64).round() as usize,
                diagnostics: BalanceReport::average(&reports),
            })
        }
        MiIntegration::Across | MiIntegration::Across2 => {
            let x2s: Vec<Vec<f64>> = stack.completions.iter().map(completed_x2).collect();
            let x2_bar = column_mean(&x2s);
            let ps = if mode == MiIntegration::Across {
                column_mean(&stack.ps)
            } else {
                if stack.ps_coefficients.len() != m {
                    return Err(StrategyError::InvalidSpec("across2 needs derived propensity coefficients".into()));
                }
                let a = column_mean(&stack.ps_coefficients);
                (0..x1.len()).map(|i| expit(a[0] + a[1] * x1[i] + a[2] * x2_bar[i])).collect()
            };
            let a = analyse(y, &t, &ps, &[&x1, &x2_bar], adjust, key.derive(stage::MATCHING, 0))?;
            let observed: Vec<bool> = stack.x2_missing.iter().map(|&m| !m).collect();
            let mut b = BalanceReport { pct_treated_matched: a.sample.pct_treated_matched(), ..Default::default() };
            b.insert(Covariate::X1, BalanceSlice::AveragedData, matched_std_diff(&x1, &t, &a.sample, None));
            b.insert(Covariate::X1, BalanceSlice::FullData, matched_std_diff(&x1, &t, &a.sample, None));
            b.insert(Covariate::X1, BalanceSlice::ObservedPart, matched_std_diff(&x1, &t, &a.sample, Some(&observed)));
            b.insert(Covariate::X1, BalanceSlice::MissingPart, matched_std_diff(&x1, &t, &a.sample, Some(&stack.x2_missing)));
            b.insert(Covariate::X2, BalanceSlice::AveragedData, matched_std_diff(&x2_bar, &t, &a.sample, None));
            b.insert(Covariate::X2, BalanceSlice::FullData, matched_std_diff(&truth, &t, &a.sample, None));
            b.insert(Covariate::X2, BalanceSlice::ObservedPart, matched_std_diff(&x2_bar, &t, &a.sample, Some(&observed)));
            b.insert(Covariate::X2, BalanceSlice::MissingPart, matched_std_diff(&x2_bar, &t, &a.sample, Some(&stack.x2_missing)));
            Ok(EffectEstimate { att: a.att, se: Some(a.se), se_kind: SeKind::RobustCluster, n_pairs: a.n_pairs, diagnostics: b })
        }
    }
}

/// Rubin's rules: mean estimate and `W + (1 + 1/m)·B` total variance.
pub fn pool_rubin(estimates: &[f64], variances: &[f64]) -> Result<(f64, f64), StrategyError> {
    let m = estimates.len();
    if m < 2 || variances.len() != m {
        return Err(StrategyError::InvalidSpec("Rubin pooling needs m >= 2 matching estimates and variances".into()));
    }
    if variances.iter().any(|&v| !(v >= 0.0)) {
        return Err(StrategyError::InvalidSpec("variances must be non-negative".into()));
    }
    let mf = m as f64;
    let pooled = estimates.iter().sum::<f64>() / mf;
    let within = variances.iter().sum::<f64>() / mf;
    let between = estimates.iter().map(|e| (e - pooled) * (e - pooled)).sum::<f64>() / (mf - 1.0);
    Ok((pooled, within + (1.0 + 1.0 / mf) * between))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapSummary {
    /// Sample SD of the successful resample estimates.
    pub se: f64,
    pub n_success: usize,
    pub n_failed: usize,
}

/// Nonparametric bootstrap of an arbitrary estimator: resample `n` rows with
/// replacement (masks travel with rows) `reps` times, re-run the estimator,
/// drop and count failures.
pub fn bootstrap_se<F>(d: &Dataset, reps: usize, key: StreamKey, estimator: F) -> Result<BootstrapSummary, StrategyError>
where
    F: Fn(&Dataset, StreamKey) -> Result<f64, StrategyError> + Sync,
{
    if reps < 2 {
        return Err(StrategyError::InvalidSpec("bootstrap needs at least 2 resamples".into()));
    }
    let n = d.len();
    let results: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let k = key.derive(stage::BOOTSTRAP, b as u64);
            let mut rng = k.derive(stage::RESAMPLE, 0).rng();
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            estimator(&d.select(&rows), k.derive(stage::STRATEGY, 0)).ok().filter(|v| v.is_finite())
        })
        .collect();
    let ok: Vec<f64> = results.iter().flatten().copied().collect();
    let failed = reps - ok.len();
    if failed as f64 > MAX_BOOTSTRAP_FAILURE_SHARE * reps as f64 || ok.len() < 2 {
        return Err(StrategyError::BootstrapFailures { failed, total: reps });
    }
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    let var = ok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (ok.len() - 1) as f64;
    Ok(BootstrapSummary { se: var.sqrt(), n_success: ok.len(), n_failed: failed })
}

/// Bootstrap SE of a strategy: the whole pipeline (imputation included) is
/// re-run on every resample of the incomplete dataset.
pub fn bootstrap_variance(d: &Dataset, spec: &StrategySpec, reps: usize, key: StreamKey) -> Result<BootstrapSummary, StrategyError> {
    let inner = spec.for_resample();
    inner.validate()?;
    bootstrap_se(d, reps, key, |db, k| point_estimate(db, &inner, k).map(|e| e.att))
}

/// `x2` columns of a stack as reals; exposed for diagnostics and tests.
pub fn stack_x2(stack: &ImputedStack) -> Vec<Vec<f64>> {
    stack.completions.iter().map(completed_x2).collect()
}

/// Binary column helper for callers holding `u8` data.
pub fn binary_f64(v: &[u8]) -> Vec<f64> {
    as_f64(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rubin_hand_example() {
        let (p, t) = pool_rubin(&[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!(p, 2.0);
        assert_eq!(t, 4.0);
    }

    #[test]
    fn rubin_identical_estimates() {
        let (p, t) = pool_rubin(&[0.7; 5], &[0.3; 5]).unwrap();
        assert!((p - 0.7).abs() < 1e-15);
        assert!((t - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rubin_rejects_bad_input() {
        assert!(pool_rubin(&[1.0], &[1.0]).is_err());
        assert!(pool_rubin(&[1.0, 2.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn forbidden_combination_rejected() {
        let s = StrategySpec::mi(MiImputation::RegActive, MiIntegration::Across2);
        assert!(s.validate().is_err());
        let s = StrategySpec::mi(MiImputation::RegPassive, MiIntegration::Within);
        assert!(s.validate().is_err());
        StrategySpec::mi(MiImputation::RegPassive, MiIntegration::Within).with_aux(AuxChoice::Zps).validate().unwrap();
    }

    #[test]
    fn identifiers_roundtrip() {
        for id in ["full_data", "cc", "cva", "mean_imputation", "missing_indicator", "mi:derPassive:across:z2", "mi:regPassive:within:zps:reverse", "mi:redActive:across2:unadjusted"] {
            let s: StrategySpec = id.parse().unwrap();
            assert_eq!(s.to_string(), id);
        }
        assert!("mi:derPassive".parse::<StrategySpec>().is_err());
        assert!("bogus".parse::<StrategySpec>().is_err());
    }

    #[test]
    fn regpassive_plan_follows_footnote_order() {
        let s = StrategySpec::mi(MiImputation::RegPassive, MiIntegration::Within).with_aux(AuxChoice::Zps);
        let spec = imputation_spec(&s).unwrap();
        let order: Vec<(ColumnId, ImputeMethod)> = spec.columns.iter().map(|c| (c.column, c.method)).collect();
        assert_eq!(
            order,
            vec![(ColumnId::X2, ImputeMethod::Logreg), (ColumnId::Ps, ImputeMethod::PassiveDerivePs), (ColumnId::Zps, ImputeMethod::Pmm)]
        );
        assert_eq!(spec.columns[0].predictors, vec![ColumnId::X1, ColumnId::T, ColumnId::Y, ColumnId::Zps]);
        assert_eq!(spec.columns[2].predictors, vec![ColumnId::X1, ColumnId::X2, ColumnId::T, ColumnId::Y, ColumnId::Ps]);
    }

    #[test]
    fn active_plan_matches_predictor_table() {
        let s = StrategySpec::mi(MiImputation::RegActive, MiIntegration::Within).with_aux(AuxChoice::Z2);
        let spec = imputation_spec(&s).unwrap();
        assert!(spec.active_ps);
        assert_eq!(spec.columns[0].predictors, vec![ColumnId::X1, ColumnId::T, ColumnId::Y, ColumnId::Ps, ColumnId::Z2]);
        assert_eq!(spec.columns[1].predictors, vec![ColumnId::X1, ColumnId::X2, ColumnId::T, ColumnId::Y, ColumnId::Z2]);
    }

    #[test]
    fn constant_estimator_has_zero_bootstrap_se() {
        let d = crate::datagen::generate_dataset(
            &crate::datagen::GenerativeParams { n: 50, ..Default::default() },
            &mut StreamKey::root(1).rng(),
        )
        .unwrap();
        let b = bootstrap_se(&d, 20, StreamKey::root(2), |_, _| Ok(1.25)).unwrap();
        assert_eq!(b.se, 0.0);
        assert_eq!(b.n_failed, 0);
    }

    #[test]
    fn excessive_bootstrap_failures_error() {
        let d = crate::datagen::generate_dataset(
            &crate::datagen::GenerativeParams { n: 50, ..Default::default() },
            &mut StreamKey::root(1).rng(),
        )
        .unwrap();
        let err = bootstrap_se(&d, 20, StreamKey::root(2), |db, _| {
            if db.y[0] > 0.0 {
                Err(StrategyError::InsufficientData("x".into()))
            } else {
                Ok(0.0)
            }
        })
        .unwrap_err();
        assert!(matches!(err, StrategyError::BootstrapFailures { .. }));
    }
}
