pub mod adaptation;
pub mod bundle;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod jscc;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod pipeline;
pub mod report;
pub mod robustness;
pub mod rng;
pub mod sweep;

pub use error::{Error, Result};
