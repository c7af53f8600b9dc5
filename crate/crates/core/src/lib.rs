//! Dropout and its variants treated as data augmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense row-major matrices and keyed, reproducible random streams.
//! - [`network`]: ReLU multilayer perceptrons with softmax output, exact
//!   backpropagation (including through dropout masks and Gaussian-matched
//!   pre-activations) and a binary checkpoint format.
//! - [`noise`]: dropout, random-level dropout and Gaussian-matched corruption.
//! - [`backprojection`]: gradient descent on inputs so that the clean network
//!   reproduces the hidden activations of a corrupted forward pass, plus the
//!   probability analysis of a single shared back-projected input.
//! - [`training`]: plain, noisy and back-projected training protocols with
//!   validation-based selection and refitting.
//! - [`data`]: IDX and CSV loaders, deterministic splits, PCA without whitening
//!   and synthetic Gaussian blobs.

// `!(a <= b)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backprojection;
pub mod data;
pub mod error;
pub mod linalg;
pub mod network;
pub mod noise;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{Reduced, Reduction, RngStream, Tensor2D};
