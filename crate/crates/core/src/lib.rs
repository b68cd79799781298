//! Survival analysis for recurrent idle events.
//!
//! - [`survival`]: domain types, Kaplan-Meier, two-sample log-rank, strata
//! - [`coxph`]: Newton-Raphson Cox PH and the Breslow baseline hazard
//! - [`metrics`]: concordance, IPCW Brier score, integrated Brier score
//! - [`data`]: CSV schema, feature engineering, windowing, chronological
//!   split and a synthetic driver generator with known ground truth
// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coxph;
pub mod data;
mod error;
pub mod metrics;
mod special;
mod step;
pub mod survival;

pub use error::{CoreError, Result};
pub use special::{chi2_sf, ln_gamma, regularized_gamma_q};
pub use step::StepFunction;
pub use survival::IdleEvent;
