pub mod autograd;
pub mod baselines;
pub mod bench;
pub mod data;
pub mod error;
pub mod experiments;
pub mod hyper;
pub mod lan;
pub mod model;
pub mod nn;
pub mod sparse;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Graph, ParamId, Params, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
