pub mod analysis;
pub mod cli;
pub mod data;
pub mod elgca;
pub mod error;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
