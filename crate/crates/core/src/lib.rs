pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cmpi;
pub mod cnnr;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, ResampleMap, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
