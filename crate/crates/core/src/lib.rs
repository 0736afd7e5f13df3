pub mod diffcore;
pub mod error;

pub use error::{Error, Result};
