//! Simulation laboratory for propensity-score matching with a partially
//! observed confounder handled by multiple imputation.

pub mod datagen;
pub mod glm;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod mice;
pub mod missingness;
pub mod psm;
pub mod rng;
pub mod strategies;
