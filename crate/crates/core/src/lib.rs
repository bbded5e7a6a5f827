//! Test-time robust adaptation toolkit.
//!
//! A small reverse-mode autodiff engine drives batch-normalized MLP/CNN
//! classifiers, L∞ attacks, and the teacher-anchored (TgRA) and
//! self-consistency (TRADES-U) adaptation objectives, together with the
//! corruption pipeline, synthetic data, and evaluation harness used to
//! compare them.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod attacks;
pub mod audit;
pub mod codec;
pub mod corruptions;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
