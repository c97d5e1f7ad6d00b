//! Unknown-intent detection for dialogue utterances.
//!
//! A bidirectional LSTM classifier is trained on the known intents, either
//! with plain softmax cross-entropy or with a large margin cosine loss, and
//! its sentence features feed a local outlier factor detector that flags
//! utterances from intents never seen in training.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
