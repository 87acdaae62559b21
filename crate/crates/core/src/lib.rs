pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod interpret;
pub mod linalg;
pub mod network;
pub mod parallel;
pub mod params;
pub mod train;

pub use error::{Error, Result};
