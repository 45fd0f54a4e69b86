//! Differentially private training with shuffled model weights.
//!
//! The crate covers the privacy accountant for the shuffled Gaussian
//! mechanism, the lognormal approximation it relies on, a small network
//! library whose blocks admit function-preserving weight permutations, a
//! DP-SGD trainer that permutes weights after every step, and tools to audit
//! and visualise the mechanism.
//!
//! The dense network code is generic over [`scalar::Scalar`]; the aliases
//! below fix it to `f64`, which is what the trainer and tests use.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::manual_range_contains)]

pub mod accountant;
pub mod audit;
pub mod dataset;
pub mod error;
pub mod lognormal;
pub mod nn;
pub mod permute;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod toyexp;
pub mod trainer;

pub use error::{Error, Result};

pub type Matrix = tensor::Matrix<f64>;
pub type Model = nn::Model<f64>;
pub type MlpParams = nn::MlpParams<f64>;
pub type AttentionParams = nn::AttentionParams<f64>;
pub type Sample = nn::Sample<f64>;
pub type PerSampleGrads = nn::PerSampleGrads<f64>;
pub type TrainOutcome = trainer::TrainOutcome<f64>;
