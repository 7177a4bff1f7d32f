//! Desk-scale laboratory for transferable targeted adversarial attacks.
//!
//! The crate trains small, architecturally diverse CNN classifiers, crafts
//! targeted adversarial examples on source models with composable transfer
//! methods (momentum, translation-invariant smoothing, diverse inputs) and
//! interchangeable losses, and measures how often the target class transfers
//! to held-out models.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors and reverse-mode differentiation.
//! - [`data`]: CIFAR-10 / MNIST ingestion and batching.
//! - [`models`]: the four mini architectures, training, weight files.
//! - [`losses`]: cross-entropy, logit, C&W and Poincaré+triplet objectives.
//! - [`attack`]: the iterative sign-gradient attack and its transfer methods.
//! - [`eval`]: experiment protocols and CSV reports.
//! - [`uap`]: data-free targeted universal perturbations.

// negated comparisons deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod uap;

pub use error::{Error, Result};
pub use tensor::Tensor;
