//! Per-detector traffic-speed forecasting.
//!
//! Each detector gets a small LSTM whose hyperparameters are tuned by a
//! Nelder-Mead search over a discrete grid, unless its normalized speed
//! pattern is close enough to a detector that already owns a model, in which
//! case that model is shared. Customization jobs run on a pool of local
//! worker threads or on remote worker processes over TCP.

pub mod coordinator;
pub mod customizer;
pub mod data;
pub mod error;
mod float_serde;
pub mod lstm;
pub mod metrics;
pub mod netproto;
pub mod nmm;

pub use error::{Error, Result};
