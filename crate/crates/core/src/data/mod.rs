//! From raw idle records to training windows.
//!
//! The usual flow is [`record::ingest_csv`] →
//! [`features::records_to_events`] → [`window::build_windows`] per driver →
//! [`window::chronological_split`] → [`features::Scaler`] fit on the
//! training targets and applied to every split.

pub mod features;
pub mod record;
pub mod synth;
pub mod time;
pub mod window;
