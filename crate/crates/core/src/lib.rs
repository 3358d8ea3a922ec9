pub mod cli;
pub mod detectors;
pub mod error;
pub mod fock;
pub mod inference;
pub mod metrology;
mod optimize;
pub mod optics;
pub mod sampling;

pub use error::{Error, Result};
