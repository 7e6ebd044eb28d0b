pub mod cli;
pub mod cpd;
pub mod diffmath;
pub mod distributions;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod eval;
pub mod models;
pub mod shbf;
pub mod special;
pub mod synthgen;
pub mod tensor_io;

pub use error::{DpmsError, Result};
