pub mod autodiff;
pub mod data;
pub mod em;
pub mod error;
pub mod experiment;
pub mod net;
pub mod noise;
pub mod numeric;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
