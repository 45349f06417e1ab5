pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod gmm;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
