pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod seed;
pub mod seg;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Tensor, Var};
