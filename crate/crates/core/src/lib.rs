//! Method-of-moments recovery of two-layer ReLU networks `y = A relu(W x) + noise`
//! from inputs drawn from a symmetric distribution.

pub mod cli;
pub mod detector;
pub mod distmat;
pub mod error;
pub mod harness;
pub mod io;
pub mod learner;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod reduce;
pub mod seeds;
pub mod spectral;

pub use error::{Error, ErrorClass, Result};
