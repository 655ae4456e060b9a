pub mod autodiff;
pub mod data;
pub mod error;
pub mod finetune;
pub mod losses;
pub mod nn;
pub mod report;
pub mod search;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
