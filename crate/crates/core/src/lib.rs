pub mod cli;
pub mod config;
pub mod data;
pub mod dfe;
pub mod equilibrium;
pub mod error;
pub mod gradcheck;
pub mod harness;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod surrogate;
pub mod tape;
pub mod tensor;

pub use error::{AefError, Result};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
