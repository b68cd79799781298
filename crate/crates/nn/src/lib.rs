//! Cox risk models trained by gradient descent on the recurrent-event
//! partial likelihood.
//!
//! - [`loss`]: the batched Breslow negative log partial likelihood
//! - [`model`]: linear, frailty-linear, MLP, transformer and FACT risk
//!   functions
//! - [`checkpoint`]: versioned binary model files
//! - [`train`]: Adam training with early stopping and evaluation
//! - [`search`]: grid search, attention profiles and ablations

pub mod checkpoint;
mod error;
pub mod loss;
pub mod model;
pub mod search;
pub mod train;

pub use error::{NnError, Result};
pub use loss::{cox_nll, cox_nll_naive, cox_nll_value, RiskSetBatch};
pub use model::{Batch, DriverIndex, FactConfig, ModelKind, RiskModel, Scores};
