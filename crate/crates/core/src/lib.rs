//! Certified robustness through mixed-noise pretraining and clean fine-tuning.
//!
//! The crate trains small convolutional classifiers with a per-sample mix of
//! clean and Gaussian-noised inputs, transfers them to a downstream task by
//! replacing the classification head and fine-tuning on clean images, and
//! certifies ℓ2 robustness of the Gaussian-smoothed classifier with Monte
//! Carlo sampling and exact binomial confidence bounds.
//!
//! Module map:
//! - [`tensor`], [`nn`], [`optim`]: the dense-tensor engine, layer graph and SGD.
//! - [`norms`]: batch / instance / group / layer normalization.
//! - [`data`]: IDX ingestion, synthetic glyph datasets, transfer splits, noise sampling.
//! - [`trainer`]: pretraining, head swap, fine-tuning.
//! - [`certify`]: smoothed prediction and certification.
//! - [`checkpoint`]: binary model persistence.
//! - [`report`]: certified-accuracy curves and comparison tables.

pub mod certify;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod norms;
pub mod optim;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
