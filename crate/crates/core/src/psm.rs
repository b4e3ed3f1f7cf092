//! Propensity-score estimation, greedy 1:1 caliper matching without
//! replacement, balance diagnostics and ATT regression on matched rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{self, logit, GlmError, RegressionFit};
use crate::matrix::Matrix;

/// Caliper width as a multiple of the SD of the logit propensity score.
pub const CALIPER_SD_FRACTION: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsmError {
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error("need at least one treated and one control subject")]
    MissingGroup,
    #[error("logit propensity score has zero spread; caliper undefined")]
    DegenerateCaliper,
    #[error("propensity score {0} outside (0, 1)")]
    InvalidScore(f64),
    #[error("pooled variance is zero but group means differ")]
    InfiniteDifference,
    #[error("matched sample has {0} pairs; at least 2 needed")]
    TooFewPairs(usize),
    #[error("input lengths differ")]
    LengthMismatch,
}

#[derive(Debug, Clone)]
pub struct PsFit {
    pub ps: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub fit: RegressionFit,
}

/// Logistic propensity model of `t` on an intercept plus `covariates`.
pub fn fit_propensity<C: AsRef<[f64]>>(covariates: &[C], t: &[f64]) -> Result<PsFit, PsmError> {
    let design = Matrix::with_intercept(covariates);
    let fit = glm::fit_logistic(&design, t)?;
    Ok(PsFit { ps: fit.fitted.clone(), coefficients: fit.coefficients.clone(), fit })
}

/// Propensity scores from `t ~ 1 + x1 + x2`, with `(α̂₀, α̂₁, α̂₂)`.
/// `x2` may be fractional (averaged completions).
pub fn estimate_ps(x1: &[f64], x2: &[f64], t: &[f64]) -> Result<(Vec<f64>, [f64; 3]), PsmError> {
    let f = fit_propensity(&[x1, x2], t)?;
    let c = &f.coefficients;
    Ok((f.ps, [c[0], c[1], c[2]]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSample {
    /// `(treated, control)` row indices.
    pub pairs: Vec<(usize, usize)>,
    /// On the logit scale.
    pub caliper_width: f64,
    pub unmatched_treated: Vec<usize>,
    pub ps_used: Vec<f64>,
}

impl MatchedSample {
    pub fn n_treated(&self) -> usize {
        self.pairs.len() + self.unmatched_treated.len()
    }

    pub fn pct_treated_matched(&self) -> f64 {
        match self.n_treated() {
            0 => 0.0,
            nt => self.pairs.len() as f64 / nt as f64,
        }
    }

    /// Matched rows in pair order (treated then control), with pair ids.
    pub fn rows(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::with_capacity(2 * self.pairs.len());
        let mut ids = Vec::with_capacity(2 * self.pairs.len());
        for (k, &(tr, co)) in self.pairs.iter().enumerate() {
            rows.push(tr);
            ids.push(k);
            rows.push(co);
            ids.push(k);
        }
        (rows, ids)
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// `0.2 · SD(logit ps)` over every subject.
pub fn caliper_width(ps: &[f64]) -> Result<f64, PsmError> {
    let logits = logits(ps)?;
    let sd = sample_sd(&logits);
    let mean_abs = logits.iter().map(|v| v.abs()).sum::<f64>() / logits.len().max(1) as f64;
    if !(sd > 1e-12 * mean_abs.max(1.0)) {
        return Err(PsmError::DegenerateCaliper);
    }
    Ok(CALIPER_SD_FRACTION * sd)
}

fn logits(ps: &[f64]) -> Result<Vec<f64>, PsmError> {
    ps.iter()
        .map(|&p| if p > 0.0 && p < 1.0 { Ok(logit(p)) } else { Err(PsmError::InvalidScore(p)) })
        .collect()
}

fn check_groups(t: &[f64]) -> Result<(), PsmError> {
    let nt = t.iter().filter(|&&v| v == 1.0).count();
    if nt == 0 || nt == t.len() {
        return Err(PsmError::MissingGroup);
    }
    Ok(())
}

/// Greedy 1:1 nearest-neighbour matching on the logit propensity score.
///
/// Treated units are visited in a uniformly random order drawn from `rng`;
/// each takes the closest unused control (lowest index on ties) if it lies
/// within the caliper, otherwise it stays unmatched.
pub fn match_caliper_nn<R: Rng + ?Sized>(ps: &[f64], t: &[f64], rng: &mut R) -> Result<MatchedSample, PsmError> {
    if ps.len() != t.len() {
        return Err(PsmError::LengthMismatch);
    }
    check_groups(t)?;
    let width = caliper_width(ps)?;
    let mut order: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 1.0).collect();
    order.shuffle(rng);
    match_in_order(ps, t, &order, width)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Greedy matching with an explicit treated processing order and caliper.
pub fn match_in_order(ps: &[f64], t: &[f64], order: &[usize], caliper_width: f64) -> Result<MatchedSample, PsmError> {
    if ps.len() != t.len() {
        return Err(PsmError::LengthMismatch);
    }
    let lg = logits(ps)?;
    // available controls keyed by (logit, index)
    let mut pool: BTreeSet<(Key, usize)> = (0..t.len()).filter(|&i| t[i] != 1.0).map(|i| (Key(lg[i]), i)).collect();
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for &tr in order {
        let target = lg[tr];
        let below = pool.range(..(Key(target), usize::MAX)).next_back().map(|&(k, _)| k.0);
        let above = pool.range((Key(target), 0)..).next().map(|&(k, _)| k.0);
        let best = match (below, above) {
            (None, None) => None,
            (Some(b), None) => Some((target - b).abs()),
            (None, Some(a)) => Some((a - target).abs()),
            (Some(b), Some(a)) => Some((target - b).abs().min((a - target).abs())),
        };
        let Some(dist) = best else {
            unmatched.push(tr);
            continue;
        };
        if dist > caliper_width {
            unmatched.push(tr);
            continue;
        }
        // lowest index among controls at exactly the best distance
        let mut choice: Option<usize> = None;
        for v in [below, above].into_iter().flatten() {
            if (v - target).abs() == dist {
                if let Some(&(_, idx)) = pool.range((Key(v), 0)..=(Key(v), usize::MAX)).next() {
                    choice = Some(choice.map_or(idx, |c: usize| c.min(idx)));
                }
            }
        }
        let co = choice.expect("a control at the best distance exists");
        pool.remove(&(Key(lg[co]), co));
        pairs.push((tr, co));
    }
    Ok(MatchedSample { pairs, caliper_width, unmatched_treated: unmatched, ps_used: ps.to_vec() })
}

/// Signed standardised difference `(m₁ − m₀) / √((v₁ + v₀)/2)` with sample
/// variances; groups are `groups[i] == 1` versus the rest.
pub fn standardized_difference(x: &[f64], groups: &[f64]) -> Result<f64, PsmError> {
    if x.len() != groups.len() {
        return Err(PsmError::LengthMismatch);
    }
    let g1: Vec<f64> = x.iter().zip(groups).filter(|(_, &g)| g == 1.0).map(|(v, _)| *v).collect();
    let g0: Vec<f64> = x.iter().zip(groups).filter(|(_, &g)| g != 1.0).map(|(v, _)| *v).collect();
    if g1.is_empty() || g0.is_empty() {
        return Err(PsmError::MissingGroup);
    }
    let m1 = g1.iter().sum::<f64>() / g1.len() as f64;
    let m0 = g0.iter().sum::<f64>() / g0.len() as f64;
    let v1 = sample_sd(&g1).powi(2);
    let v0 = sample_sd(&g0).powi(2);
    let pooled = ((v1 + v0) / 2.0).sqrt();
    if pooled == 0.0 {
        if m1 == m0 {
            return Ok(0.0);
        }
        return Err(PsmError::InfiniteDifference);
    }
    Ok((m1 - m0) / pooled)
}

/// Standardised difference of `x` between the treated and control members of
/// the matched pairs, optionally restricted to rows where `keep` holds.
pub fn matched_std_diff(x: &[f64], t: &[f64], sample: &MatchedSample, keep: Option<&[bool]>) -> Option<f64> {
    let (rows, _) = sample.rows();
    let rows: Vec<usize> = rows.into_iter().filter(|&i| keep.is_none_or(|k| k[i])).collect();
    let xs: Vec<f64> = rows.iter().map(|&i| x[i]).collect();
    let gs: Vec<f64> = rows.iter().map(|&i| t[i]).collect();
    standardized_difference(&xs, &gs).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    X1,
    X2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceSlice {
    FullData,
    ImputedData,
    AveragedData,
    ObservedPart,
    MissingPart,
    OriginalData,
}

impl BalanceSlice {
    pub const ALL: [BalanceSlice; 6] = [
        BalanceSlice::FullData,
        BalanceSlice::ImputedData,
        BalanceSlice::AveragedData,
        BalanceSlice::ObservedPart,
        BalanceSlice::MissingPart,
        BalanceSlice::OriginalData,
    ];
}

impl fmt::Display for BalanceSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BalanceSlice::FullData => "full_data",
            BalanceSlice::ImputedData => "imputed_data",
            BalanceSlice::AveragedData => "averaged_data",
            BalanceSlice::ObservedPart => "observed_part",
            BalanceSlice::MissingPart => "missing_part",
            BalanceSlice::OriginalData => "original_data",
        })
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Covariate::X1 => "x1",
            Covariate::X2 => "x2",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub pct_treated_matched: f64,
    #[serde(with = "balance_entries")]
    pub std_diff: BTreeMap<(Covariate, BalanceSlice), f64>,
}

/// Flat `[{covariate, slice, value}]` form for formats with string-only map keys.
mod balance_entries {
    use super::{BalanceSlice, Covariate};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        covariate: Covariate,
        slice: BalanceSlice,
        value: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<(Covariate, BalanceSlice), f64>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = map.iter().map(|(&(covariate, slice), &value)| Entry { covariate, slice, value }).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(Covariate, BalanceSlice), f64>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| ((e.covariate, e.slice), e.value)).collect())
    }
}

impl BalanceReport {
    pub fn get(&self, cov: Covariate, slice: BalanceSlice) -> Option<f64> {
        self.std_diff.get(&(cov, slice)).copied()
    }

    pub fn insert(&mut self, cov: Covariate, slice: BalanceSlice, value: Option<f64>) {
        if let Some(v) = value {
            self.std_diff.insert((cov, slice), v);
        }
    }

    /// Element-wise mean over reports; a slice present in only some reports
    /// is averaged over those.
    pub fn average(reports: &[BalanceReport]) -> BalanceReport {
        let mut sums: BTreeMap<(Covariate, BalanceSlice), (f64, usize)> = BTreeMap::new();
        for r in reports {
            for (k, v) in &r.std_diff {
                let e = sums.entry(*k).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        let pct = if reports.is_empty() { 0.0 } else { reports.iter().map(|r| r.pct_treated_matched).sum::<f64>() / reports.len() as f64 };
        BalanceReport { pct_treated_matched: pct, std_diff: sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjustment {
    /// `y ~ 1 + t + covariates`
    Adjusted,
    /// `y ~ 1 + t`
    Unadjusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    RobustCluster,
    RubinPooled,
    Bootstrap,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub att: f64,
    pub se: Option<f64>,
    pub se_kind: SeKind,
    pub n_pairs: usize,
    pub diagnostics: BalanceReport,
}

/// Outcome regression on matched rows.
#[derive(Debug, Clone)]
pub struct AttFit {
    pub att: f64,
    pub n_pairs: usize,
    pub fit: RegressionFit,
    design: Matrix,
    response: Vec<f64>,
    clusters: Vec<usize>,
}

impl AttFit {
    /// Cluster-robust SE of the treatment coefficient, pairs as clusters.
    pub fn robust_se(&self) -> Result<f64, PsmError> {
        let v = glm::robust_cluster_vcov(&self.fit, &self.design, &self.response, &self.clusters)?;
        Ok(v.get(1, 1).max(0.0).sqrt())
    }
}

/// Regresses `y` on `(1, t, covariates…)` over the matched rows; the ATT is
/// the coefficient on `t`. With [`Adjustment::Unadjusted`] the covariates are
/// ignored.
pub fn estimate_att<C: AsRef<[f64]>>(
    y: &[f64],
    t: &[f64],
    covariates: &[C],
    sample: &MatchedSample,
    adjust: Adjustment,
) -> Result<AttFit, PsmError> {
    if sample.pairs.len() < 2 {
        return Err(PsmError::TooFewPairs(sample.pairs.len()));
    }
    let (rows, clusters) = sample.rows();
    let mut cols: Vec<Vec<f64>> = vec![rows.iter().map(|&i| t[i]).collect()];
    if adjust == Adjustment::Adjusted {
        for c in covariates {
            let c = c.as_ref();
            cols.push(rows.iter().map(|&i| c[i]).collect());
        }
    }
    let design = Matrix::with_intercept(&cols);
    let response: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let fit = glm::fit_linear(&design, &response)?;
    Ok(AttFit { att: fit.coefficients[1], n_pairs: sample.pairs.len(), fit, design, response, clusters })
}
