//! Cross-speaker encoding (CSE) for multi-talker speech recognition.
//!
//! Branch-based SIMO encoders, the cross-encoder with partition-wise
//! embeddings, PIT / HEAT / joint-HEAT / SOT objectives, a toy two-speaker
//! mixture simulator and permutation-invariant, overlap-aware scoring.

pub mod autodiff;
pub mod error;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
