//! Toy language model with a future-token idea head and a log-space logit gate.
//!
//! A frozen toy decoder backbone is adapted with low-rank adapters and paired
//! with an auxiliary idea head that predicts the bag of words of the next `K`
//! tokens. The idea head's Bernoulli probabilities become a clamped log-space
//! gate added to the token logits, which suppresses tokens that do not fit
//! the predicted plan. The crate also ships the training loop, decoding with
//! repetition penalty, an associative-drift benchmark and a per-token gate
//! report.

pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod experiment;
pub mod gate;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;
pub mod xray;

mod error;

pub use error::{Error, Result};
