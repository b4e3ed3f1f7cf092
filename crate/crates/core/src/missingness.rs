//! Missing-data mechanisms for `X₂` and, optionally, the auxiliary `Z_ps`.
//!
//! Each mechanism is a logistic model for the missingness indicator whose
//! intercept is calibrated on the realised covariates so that the mean
//! missingness probability hits the target fraction.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{bisect, dichotomize_at_median, Dataset};
use crate::glm::expit;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MissingnessError {
    #[error("invalid missingness spec: {0}")]
    InvalidSpec(String),
    #[error("dataset already has masked cells")]
    AlreadyMasked,
    #[error("missingness intercept calibration did not converge")]
    CalibrationFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "MCAR")]
    Mcar,
    #[serde(rename = "MAR1")]
    Mar1,
    #[serde(rename = "MAR2A")]
    Mar2A,
    #[serde(rename = "MAR2B")]
    Mar2B,
    #[serde(rename = "MNAR")]
    Mnar,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Mcar => "MCAR",
            Mechanism::Mar1 => "MAR1",
            Mechanism::Mar2A => "MAR2A",
            Mechanism::Mar2B => "MAR2B",
            Mechanism::Mnar => "MNAR",
        })
    }
}

impl FromStr for Mechanism {
    type Err = MissingnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MCAR" => Ok(Mechanism::Mcar),
            "MAR1" => Ok(Mechanism::Mar1),
            "MAR2A" => Ok(Mechanism::Mar2A),
            "MAR2B" => Ok(Mechanism::Mar2B),
            "MNAR" => Ok(Mechanism::Mnar),
            other => Err(MissingnessError::InvalidSpec(format!("unknown mechanism {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuxMechanism {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "aux_MCAR")]
    Mcar,
    #[serde(rename = "aux_MAR1")]
    Mar1,
    #[serde(rename = "aux_MAR2")]
    Mar2,
}

impl fmt::Display for AuxMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxMechanism::None => "none",
            AuxMechanism::Mcar => "aux_MCAR",
            AuxMechanism::Mar1 => "aux_MAR1",
            AuxMechanism::Mar2 => "aux_MAR2",
        })
    }
}

impl FromStr for AuxMechanism {
    type Err = MissingnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "" => Ok(AuxMechanism::None),
            "aux_mcar" => Ok(AuxMechanism::Mcar),
            "aux_mar1" => Ok(AuxMechanism::Mar1),
            "aux_mar2" => Ok(AuxMechanism::Mar2),
            other => Err(MissingnessError::InvalidSpec(format!("unknown aux mechanism {other:?}"))),
        }
    }
}

/// Coefficients `(ε₁₁, ε₁₀, ε₀₁, ε₀₀)` on the `(t, ps_b)` cell indicators.
pub type AuxCoefficients = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdmSpec {
    pub mechanism: Mechanism,
    pub gamma11: f64,
    pub gamma00: f64,
    pub target_missing_x2: f64,
    pub aux_mechanism: AuxMechanism,
    /// Overrides the mechanism's default `ε` coefficients. Ignored for
    /// `aux_MCAR`, which is intercept-only.
    pub aux_coefficients: Option<AuxCoefficients>,
    pub target_missing_zps: f64,
}

impl Default for MdmSpec {
    fn default() -> Self {
        MdmSpec {
            mechanism: Mechanism::Mcar,
            gamma11: 5.0,
            gamma00: 1.0,
            target_missing_x2: 0.5,
            aux_mechanism: AuxMechanism::None,
            aux_coefficients: None,
            target_missing_zps: 0.2,
        }
    }
}

impl MdmSpec {
    pub fn new(mechanism: Mechanism) -> Self {
        MdmSpec { mechanism, ..Default::default() }
    }

    pub fn with_aux(mut self, aux: AuxMechanism) -> Self {
        self.aux_mechanism = aux;
        self
    }

    pub fn validate(&self) -> Result<(), MissingnessError> {
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !open(self.target_missing_x2) {
            return Err(MissingnessError::InvalidSpec("target_missing_x2 must lie in (0, 1)".into()));
        }
        if self.aux_mechanism != AuxMechanism::None {
            if self.mechanism != Mechanism::Mar2B {
                return Err(MissingnessError::InvalidSpec("auxiliary missingness requires the MAR2B mechanism".into()));
            }
            if !open(self.target_missing_zps) {
                return Err(MissingnessError::InvalidSpec("target_missing_zps must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn aux_coefficients(&self) -> AuxCoefficients {
        match self.aux_mechanism {
            AuxMechanism::None | AuxMechanism::Mcar => [0.0; 4],
            AuxMechanism::Mar1 => self.aux_coefficients.unwrap_or([5.0, 0.0, 0.0, 5.0]),
            AuxMechanism::Mar2 => self.aux_coefficients.unwrap_or([0.0, 5.0, 5.0, 0.0]),
        }
    }
}

/// Per-subject linear predictor of `X₂` missingness, excluding the intercept.
pub fn x2_offsets(d: &Dataset, spec: &MdmSpec) -> Vec<f64> {
    let yb = dichotomize_at_median(&d.y);
    let third: Option<Vec<u8>> = match spec.mechanism {
        Mechanism::Mcar | Mechanism::Mar1 => None,
        Mechanism::Mar2A => Some(dichotomize_at_median(&d.z2)),
        Mechanism::Mar2B => Some(dichotomize_at_median(&d.zps_true)),
        Mechanism::Mnar => Some(d.x2_true.clone()),
    };
    (0..d.len())
        .map(|i| {
            if spec.mechanism == Mechanism::Mcar {
                return 0.0;
            }
            let c = third.as_ref().map(|v| v[i]);
            let high = d.t[i] == 1 && yb[i] == 1 && c.is_none_or(|c| c == 1);
            let low = d.t[i] == 0 && yb[i] == 0 && c.is_none_or(|c| c == 0);
            if high {
                spec.gamma11
            } else if low {
                spec.gamma00
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-subject linear predictor of `Z_ps` missingness, excluding the intercept.
pub fn zps_offsets(d: &Dataset, spec: &MdmSpec) -> Vec<f64> {
    let psb = dichotomize_at_median(&d.ps_full);
    let [e11, e10, e01, e00] = spec.aux_coefficients();
    (0..d.len())
        .map(|i| match (d.t[i], psb[i]) {
            (1, 1) => e11,
            (1, _) => e10,
            (_, 1) => e01,
            _ => e00,
        })
        .collect()
}

/// Intercept making the mean of `expit(γ₀ + offsetᵢ)` equal `target` to 1e-8.
pub fn calibrate_intercept(offsets: &[f64], target: f64) -> Result<f64, MissingnessError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(MissingnessError::InvalidSpec(format!("target fraction {target} unreachable")));
    }
    let n = offsets.len() as f64;
    let f = |g: f64| offsets.iter().map(|o| expit(g + o)).sum::<f64>() / n - target;
    bisect(f, -80.0, 80.0, 1e-8, 400).ok_or(MissingnessError::CalibrationFailure)
}

/// Calibrated intercepts `(γ₀, ε₀)` for a dataset; `ε₀` only when the
/// auxiliary column is masked.
pub fn calibrated_intercepts(d: &Dataset, spec: &MdmSpec) -> Result<(f64, Option<f64>), MissingnessError> {
    spec.validate()?;
    let g0 = calibrate_intercept(&x2_offsets(d, spec), spec.target_missing_x2)?;
    let e0 = if spec.aux_mechanism == AuxMechanism::None {
        None
    } else {
        Some(calibrate_intercept(&zps_offsets(d, spec), spec.target_missing_zps)?)
    };
    Ok((g0, e0))
}

/// Masks `X₂` (and `Z_ps` when an auxiliary mechanism is set). Truth columns
/// are left untouched.
pub fn induce_missingness<R: Rng + ?Sized>(d: &Dataset, spec: &MdmSpec, rng: &mut R) -> Result<Dataset, MissingnessError> {
    if d.has_missing() {
        return Err(MissingnessError::AlreadyMasked);
    }
    let (g0, e0) = calibrated_intercepts(d, spec)?;
    let mut out = d.clone();
    for (i, o) in x2_offsets(d, spec).iter().enumerate() {
        if rng.random::<f64>() < expit(g0 + o) {
            out.x2[i] = None;
        }
    }
    if let Some(e0) = e0 {
        for (i, o) in zps_offsets(d, spec).iter().enumerate() {
            if rng.random::<f64>() < expit(e0 + o) {
                out.zps[i] = None;
            }
        }
    }
    Ok(out)
}
