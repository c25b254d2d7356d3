pub mod autodiff;
pub mod lab;
mod error;
pub mod mask;
pub mod model;
pub mod probe;
pub mod objective;
pub mod synth;
pub mod train;

pub use autodiff::{Tensor, TensorError};
pub use error::{Error, Result};
