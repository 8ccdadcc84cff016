//! Between-practice heterogeneity in EHR cohorts: data-quality stability
//! metrics, Cox frailty models and frailty-adjusted risk.

// `!(x > 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cohort;
pub mod error;
pub mod imputation;
mod par;
pub mod riskmodel;
pub mod rng;
pub mod stability;
pub mod stats;
pub mod survival;
pub mod synthgen;

pub use error::{Error, ErrorKind, Result};
