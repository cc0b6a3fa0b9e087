#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fsio;
pub mod infer;
pub mod nn;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{build_model, Checkpoint, Mode, ModelConfig, QuantizedModel};
pub use quant::{GradScale, QuantSpec, StepOwner, StepSizeParam};
pub use tensor::{IntTensor, Tape, Tensor, Var};
