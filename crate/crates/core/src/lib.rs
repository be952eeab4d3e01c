//! Sparse mixture-of-experts transformer encoders trained with CTC.
//!
//! Three encoder families share one code path: a dense FFN baseline, Switch
//! (an independent top-1 router per layer) and Omni-router (a single router
//! weight matrix reused by every MoE layer). Around them sit a small
//! reverse-mode autodiff engine, CTC loss and decoding, a synthetic
//! speech-like corpus, the training loop, and routing diagnostics.

pub mod analytics;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod moe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
