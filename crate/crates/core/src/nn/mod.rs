//! Reverse-mode autodiff and the network built on it.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod model;
pub mod params;

pub use gradcheck::{grad_check, grad_check_store, GradReport};
pub use graph::{Graph, Tensor, Var};
pub use model::{build_input, AlphaNet, Forward, ModelConfig, ModelInput, OutputActivation};
pub use params::{init_truncated_normal, Init, Param, ParameterStore, Session};
