//! Hypernetwork-generated per-user face verifiers.
//!
//! A trainable generator network maps a single enrollment embedding to the
//! full weight vector of a tiny grouped-convolution verifier. Training uses a
//! weighted binary cross-entropy over an all-pairs batch prediction matrix, a
//! weight-norm regularizer, cluster-centered hard-negative batch sampling,
//! and staged scheduling of batch size, regularizer weight, and sampling mode.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hypernet;
pub mod kcs;
pub mod modelio;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod verifier;

pub use error::{Error, Result};
pub use tensor::Tensor;
