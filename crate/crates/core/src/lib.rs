//! Task-conditioned latent world models and actor-critic agents for
//! non-stationary control.

pub mod behavior;
pub mod context;
pub mod diffmath;
pub mod envs;
pub mod nn;
pub mod runio;
pub mod taskinfer;
pub mod trainer;
pub mod worldmodel;

/// Tensor used by the network layers and trainer.
pub type Tensor = diffmath::Tensor<f64>;
/// Tape used by the network layers and trainer.
pub type Tape = diffmath::Tape<f64>;
