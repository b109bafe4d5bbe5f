pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
mod optim;
pub mod quant;
pub mod search;
pub mod taps;
pub mod tuning;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
