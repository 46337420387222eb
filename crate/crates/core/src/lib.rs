//! Pyramid scale network for crowd density estimation.

pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{AdamConfig, AdamState, ConvSpec, GradCheckReport, SeededRng, Tape, Tensor, Var};
