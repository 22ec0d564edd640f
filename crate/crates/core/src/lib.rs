pub mod backbone;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
