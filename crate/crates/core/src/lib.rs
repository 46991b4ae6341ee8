pub mod cli;
pub mod data;
pub mod error;
pub mod net;
pub mod norm;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
