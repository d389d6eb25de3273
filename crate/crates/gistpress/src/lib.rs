//! Gist-token prompt compression at desk scale.

pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
