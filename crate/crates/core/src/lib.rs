//! Propensity-score balancing weights.
//!
//! Fit a propensity model, derive weights for a target population, check
//! covariate balance and estimate the weighted average treatment effect.
//! The [`asymptotics`] module evaluates large-sample variances for
//! univariate scenarios.

pub mod asymptotics;
pub mod balance;
pub mod cli;
pub mod dataset;
pub mod estimate;
pub mod propensity;
pub mod quadrature;
pub mod stats;
pub mod weights;

pub use balance::{asb, verify_exact_balance, BalanceReport};
pub use dataset::{Dataset, Group, IngestSchema, PerGroup};
pub use estimate::{bootstrap_se, wate, BootstrapConfig, EstimateReport};
pub use propensity::{fit, FitOptions, PropensityModel};
pub use weights::{compute, WeightScheme, WeightedSample};

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] dataset::DataError),
    #[error(transparent)]
    Fit(#[from] propensity::FitError),
    #[error(transparent)]
    Weights(#[from] weights::WeightError),
    #[error(transparent)]
    Balance(#[from] balance::BalanceError),
    #[error(transparent)]
    Estimate(#[from] estimate::EstimateError),
    #[error(transparent)]
    Asymptotics(#[from] asymptotics::AsymptoticsError),
}
