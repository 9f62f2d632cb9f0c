pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{MastError, Result};
