//! Proximal sparse skip gating for U-shaped segmentation networks.
//!
//! The crate carries its own small tensor and reverse-mode autodiff core
//! ([`Tape`]), the convolutional operators the network needs, the gating
//! operator ([`gate`]), the network itself ([`model`]), a synthetic
//! segmentation corpus ([`data`]), and training/evaluation utilities.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gate;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use gate::{GateParams, GateSpec, GateVariant};
pub use model::{ModelConfig, ModelParams};
pub use tensor::Tensor;
