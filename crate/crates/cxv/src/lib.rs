//! Convolutional Xformers for Vision (CXV): a from-scratch training engine
//! for linear-attention/convolution hybrid image classifiers.
//!
//! The crate provides:
//! - a tape-based reverse-mode autodiff tensor engine (`tensor`),
//! - four interchangeable token mixers: an exact softmax reference plus
//!   Linear Transformer, ReLU-kernel Performer, and Nystromformer (`attention`),
//! - the CXV network and the Hybrid ViLT variant with parameter/MAC
//!   profiling (`model`, `profile`),
//! - AdamW and SGD plus the dual-optimizer plateau controller (`optim`),
//! - CIFAR-10/100 binary ingestion, RandAugment, batching (`data`),
//! - the training loop, schedules, metrics, checkpoints (`trainer`),
//! - a text config and the `cxv` CLI (`config`, the `cxv` binary).

pub mod attention;
pub mod data;
pub mod model;
pub mod optim;
pub mod profile;
pub mod error;
pub mod scalar;
pub mod tensor;

pub use error::{CxvError, Result};
pub use scalar::Scalar;
pub use tensor::{Ctx, Tensor};
