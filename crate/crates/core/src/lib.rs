//! Channel pruning for convolutional networks under a tapering resource
//! budget.
//!
//! Each prunable channel carries a parameter `rho`; its retention
//! probability is `sigmoid(rho)`. During training a stochastic gate scales
//! the channel by a factor in `[0, 1]` drawn from `rho` and uniform noise.
//! A controller drives the expected resource cost `F` of the network
//! (MACs by default) down a schedule while the network keeps training.

pub mod container;
pub mod controller;
pub mod data;
pub mod error;
pub mod gate;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod real;
pub mod resource;
pub mod rho;
pub mod rng;
pub mod solver;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
