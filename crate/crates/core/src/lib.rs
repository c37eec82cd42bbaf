//! Kernel-level quantization for convolution weights.

mod bytes;
pub mod clustering;
pub mod codec;
pub mod error;
pub mod finetune;
pub mod kernel;
pub mod metrics;
pub mod quantizer;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
