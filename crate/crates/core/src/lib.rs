//! Detail-preserving network for retinal vessel segmentation.

pub mod autograd;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod predict;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Eager, Graph, Param, Tape, Traced, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor4};
