//! Low-light image enhancement with a structural-prior guided
//! generative adversarial transformer.
//!
//! The crate bundles a small CPU tensor library with reverse-mode
//! differentiation, windowed multi-head attention blocks, the U-shaped
//! generator / structure estimator pair, two feature-guided
//! discriminators, the adversarial training loop, and the `spgat` CLI
//! built on top of it all.

pub mod attention;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pwstb;
pub mod windowing;
pub mod config;
pub mod gradcheck;
pub mod imageio;
pub mod manifest;
pub mod tensor;
pub mod train;

pub use tensor::{Scalar, Tensor, TensorError};
