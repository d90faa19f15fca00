//! Ring-ordered peer-to-peer federated continual learning for low-dose image
//! denoising, with an intermediate controller and comparison baselines.

pub mod continual;
pub mod controller;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod proto;
pub mod tensor;

pub use nn::{Architecture, DenoiserModel, NnError};
pub use tensor::{ParamVector, Tensor, TensorError};
