//! Two-stream sequence classification with recurrent encoders and
//! cascade dot-product attention.
//!
//! Six architectures share the same parts: [`rnn`] (LSTM with exact BPTT),
//! [`attention`] (soft dot global attention), [`models`] (wiring, parameter
//! counting, checkpoints), [`optim`] (loss, Adam, training loop),
//! [`data`] (clip files, manifests, synthetic tasks) and [`metrics`].

pub mod attention;
mod bytes;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rnn;
pub mod tensor;

pub use error::{Error, Result};
