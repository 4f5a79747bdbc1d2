pub mod cli;
pub mod error;
pub mod net;
pub mod nn;
pub mod temporal;
pub mod tensor;
pub mod tooling;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
