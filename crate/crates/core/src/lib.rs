pub mod checkpoint;
pub mod convengine;
pub mod datasets;
pub mod error;
pub mod filterbank;
pub mod network;
pub mod render;
pub mod steering;

pub use error::{Error, Result};
