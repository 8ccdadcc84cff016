//! Cox models with practice-level random effects, risk prediction and
//! resampling utilities.

mod bootstrap;
mod cox;
mod data;
mod effects;
pub(crate) mod engine;
mod frailty;
mod risk;
mod step;

pub use bootstrap::{bootstrap_clusters, bootstrap_risk_ci, BootstrapInterval, MAX_FAILURE_RATE};
pub use cox::{breslow_baseline, fit_cox, log_partial_likelihood, score, CoxFit, CoxOptions};
pub use data::SurvivalDataset;
pub use effects::{random_effect_risks, simulate_random_effect_draws, DrawSpec, DrawSummary, PERCENTILES};
pub use frailty::{
    fit_random_intercept, fit_random_intercept_at, fit_random_slope, FitDiagnostics, FrailtyFit, FrailtyOptions,
    MixedFit, SlopeOptions,
};
pub use risk::{adjust_risk, predict_risk};
pub use step::StepFunction;
