//! Sparse variational inference for latent Gaussian-process models with
//! black-box likelihoods.

pub mod elbo;
pub mod error;
pub mod io;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod oracles;
pub mod packing;
pub mod posterior;
pub mod predict;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
