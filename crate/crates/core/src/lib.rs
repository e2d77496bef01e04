//! Lipschitz certificates for neural networks with GroupSort, MaxMin and
//! Householder activations via semidefinite programming.

pub mod activations;
pub mod assembly;
pub mod baselines;
pub mod certify;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod model;
pub mod qc;
pub mod rng;
pub mod sdp;
pub mod solver;

pub use error::{LipError, Result};
