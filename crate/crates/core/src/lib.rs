//! Numerical laboratory for the ε-rank of neuron functions.

pub mod error;
pub mod gram;
pub mod init;
pub mod linalg;
pub mod net;
pub mod rfm;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
