//! Vision-transformer classifiers with a frozen, residually wired
//! language-model block inserted between encoder and classifier.

pub mod autograd;
pub mod backbone;
pub mod booster;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod llm_block;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{grad_check, GradCheckReport, Grads, Graph, Var};
pub use error::{Error, FormatError, Result};
pub use tensor::{Precision, Scalar, Tensor};
