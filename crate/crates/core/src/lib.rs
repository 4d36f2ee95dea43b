pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gid;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tensor;

pub use autodiff::{Gradients, Param, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
