//! Multi-channel E(n)-equivariant graph neural networks.
//!
//! The crate carries its own small reverse-mode differentiation engine
//! ([`tape`]), the network layers ([`nn`], [`egnn`]), physics dataset
//! generators and a portable array container ([`data`]), training utilities
//! ([`train`]) and a property harness for the symmetry claims ([`equicheck`]).

pub mod data;
pub mod egnn;
pub mod equicheck;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
