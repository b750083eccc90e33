pub mod backbone;
pub mod boxes;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod multibox;
pub mod params;
pub mod postprocess;
pub mod tensor;

pub use error::{Error, Result};
