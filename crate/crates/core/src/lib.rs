pub mod attention;
pub mod cli;
pub mod error;
pub mod model;
pub mod tensor;
pub mod training;
pub mod upcycle;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
