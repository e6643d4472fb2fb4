pub mod bench;
pub mod conv;
pub mod data;
pub mod error;
pub mod gemm;
pub mod layers;
pub mod model;
pub mod rng;
pub mod segmentation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
