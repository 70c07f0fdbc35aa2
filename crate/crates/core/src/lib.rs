//! Dual-precision quantized training: shared `b`-bit weights plus one
//! up-scaling bit per weight that selects a `b + 1`-bit mode.

pub mod data;
pub mod dual;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pack;
pub mod quant;
pub mod tensor;

pub use dual::{DualModel, Precision, QuantizedModel, TrainConfig};
pub use error::{Error, Result};
pub use quant::{LevelTensor, QuantSpec, ScaleRule, UpscaleBits};
pub use tensor::Tensor;
