pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod interval;
mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
