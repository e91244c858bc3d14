//! Adversarial sample crafting and artifact-based detection for small
//! feedforward networks.
//!
//! The crate trains dropout networks, generates adversarial samples with
//! four gradient-based attacks plus perturbation-matched noisy baselines,
//! and detects adversarial inputs from two artifacts: kernel density in the
//! last hidden layer's feature space and Monte-Carlo-dropout uncertainty,
//! combined by a logistic-regression detector evaluated with ROC curves.

pub mod artifact;
pub mod attack;
pub mod data;
pub mod detector;
pub mod error;
pub mod nn;
pub mod persist;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
