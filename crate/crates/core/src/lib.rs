pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod encoders;
pub mod error;
pub mod imbalance;
pub mod model;
pub mod nn;
pub mod params;
pub mod prior;
pub mod projector;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{param_grad_check, Initializer, ParamCheck, ParamGroup, ParamId, ParamStore, Session};
pub use rng::Rng;
pub use tensor::Tensor;
