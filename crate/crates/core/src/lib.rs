pub mod ablation;
pub mod blocks;
pub mod checkpoint;
mod codec;
mod error;
pub mod fusion;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod projection;
pub mod scene;
pub mod sscv;
pub mod train;

pub use error::{Error, Result};
