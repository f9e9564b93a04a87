pub mod audio;
pub mod config;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod flow;
pub mod model;
pub mod nn;
pub mod phoneme;
pub mod pipeline;
pub mod rng;
pub mod runconfig;
pub mod speaker;
pub mod train;
pub mod vae;

pub use candle_core;
pub use error::{Error, Result};
