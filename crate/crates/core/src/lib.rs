//! Gaussian-process state-space models learned by particle Gibbs with
//! ancestor sampling, with the transition function marginalized out.

pub mod benchmark;
pub mod error;
pub mod fic;
pub mod gp_prior;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod pgas;
pub mod predict;
pub mod smc;

pub use error::{Error, Result};
