//! Core numerics for hierarchical face-attribute representations.
//!
//! This crate is `no_std` (alloc required) and carries the pure
//! computational pieces of the pipeline:
//!
//! - [`tensor`]: dense channel-major tensors and the forward/backward
//!   kernels (convolution, pooling, PReLU, cross-channel normalization,
//!   affine, softmax cross-entropy, dropout).
//! - [`netdef`]: the face-classification layer stack, shape inference,
//!   seeded initialization and tapped forward passes.
//! - [`featex`]: the two-stage multi-scale pooling that turns tapped
//!   activations into the seven fixed-size representations C2..F2.
//! - [`svm`]: per-attribute linear hinge-loss classifiers.
//! - [`trainer`]: toy-scale SGD training with plateau scheduling and
//!   finite-difference gradient verification.
//! - [`patch`]: face-patch preprocessing and training augmentation.
//!
//! File formats, dataset parsing and the CLI live in the companion
//! `facerep` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod featex;
pub mod netdef;
pub mod patch;
pub mod svm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
