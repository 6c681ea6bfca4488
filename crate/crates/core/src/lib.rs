//! Two-agent latent world models trained by imagined self-play on a
//! top-down racing simulator.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod autodiff;
pub mod behavior;
pub mod env;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod worldmodel;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type WorldModelF32 = worldmodel::WorldModel<f32>;
pub type WorldModelF64 = worldmodel::WorldModel<f64>;
pub type BehaviorF32 = behavior::Behavior<f32>;
pub type BehaviorF64 = behavior::Behavior<f64>;
pub type AgentsF32 = trainer::Agents<f32>;
pub type AgentsF64 = trainer::Agents<f64>;
pub type TrainerF32 = trainer::Trainer<f32>;
pub type TrainerF64 = trainer::Trainer<f64>;
pub type GraphF32 = autodiff::Graph<f32>;
pub type GraphF64 = autodiff::Graph<f64>;
