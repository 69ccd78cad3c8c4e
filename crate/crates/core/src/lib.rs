//! Character-level adversarial text generation in which the critic compares
//! generated softmax sequences against an autoencoder's softened
//! reconstructions of real text, plus the one-hot baseline, evaluation
//! metrics and diagnostics.

pub mod autoencoder;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gan;
pub mod optim;
pub mod params;
pub mod seq;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
