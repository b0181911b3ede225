pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod error;
pub mod goctconv;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
