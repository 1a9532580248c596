//! Channel-level latent probing of image classifiers.
//!
//! A style-based generator maps a seed to per-layer style vectors and those to
//! an image. Perturbing one style channel at a time and watching the target
//! logit of a system under test separates channels the model relies on from
//! those it ignores; a judgment backend then splits the influential channels
//! into task-relevant and spurious ones, and boundary images along relevant
//! channels feed a head-only repair.

pub mod attribution;
pub mod domain;
pub mod error;
pub mod genbackend;
pub mod metrics;
pub mod perturb;
pub mod protocol;
pub mod repair;
pub mod scenario;
pub mod sensitivity;
pub mod sut;
pub mod tensor_io;

pub use domain::*;
pub use error::{Error, Result};
