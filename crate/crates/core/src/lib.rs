pub mod ablation;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
