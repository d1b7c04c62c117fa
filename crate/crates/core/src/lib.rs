//! Spike-driven transformer with dual-spike self-attention (Resformer).

pub mod attention;
pub mod audit;
pub mod autograd;
pub mod error;
pub mod ffn;
pub mod model;
pub mod neuron;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
