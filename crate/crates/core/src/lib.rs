//! Hybrid SSM/attention video encoder with frame-wise masked autoregressive
//! feature-alignment pretraining, fine-tuning, synthetic data and an analytic
//! cost model.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod finetune;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tensor;

pub use config::{ArMode, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{Tape, Tensor, Var};
