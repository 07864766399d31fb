//! Desk-scale federated-learning simulator for malicious-parameter data
//! extraction from transformer language models.
//!
//! A server ships honestly-shaped but adversarially-valued weights
//! ([`malice`]), simulated users return fedSGD gradients ([`fedsim`]), and the
//! attacker reads token sequences back out of the update ([`recovery`]).
//! The numeric core ([`numkernel`], [`model`], [`solvers`]) is generic over the
//! scalar type; the attack layers work in `f64`.

pub mod corpus;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod malice;
pub mod model;
pub mod numkernel;
pub mod recovery;
pub mod scalar;
pub mod solvers;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numkernel::Matrix<f64>;
pub type Matrix32 = numkernel::Matrix<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type GradientUpdate64 = model::GradientUpdate<f64>;
pub type GradientUpdate32 = model::GradientUpdate<f32>;
