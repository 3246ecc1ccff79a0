//! Artificial M-mode echocardiography toolkit.
//!
//! Turns B-mode echo video tensors into M-mode images sampled along rotated
//! scan lines, trains a small convolutional encoder to regress left-ventricular
//! ejection fraction under supervised and contrastive self-supervised regimes,
//! and evaluates cardiomyopathy classification. A synthetic pulsating-ellipse
//! video generator with analytically known EF serves as the end-to-end oracle.

pub mod augment;
pub mod config;
pub mod data_model;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod mmode;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
