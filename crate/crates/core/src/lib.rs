//! Distribution-aware companding quantization (DACQ) for post-training
//! weight quantization.
//!
//! The crate is organised around the quantization pipeline:
//!
//! - [`tensorio`]: native tensor / quantized-artifact containers and 4-bit packing
//! - [`distfit`]: standardization and quantile-space goodness of fit against
//!   Normal, Laplace and Logistic references
//! - [`grids`]: uniform, logistic and hybrid reconstruction levels
//! - [`quantizer`]: group-wise nearest-level quantization with the hybrid
//!   mixing search, and exact dequantization
//! - [`awq`]: activation statistics and the per-channel scale search
//! - [`evalx`]: reconstruction / activation error reporting
//! - [`synth`]: seeded synthetic weights and calibration activations

pub mod awq;
pub mod distfit;
pub mod error;
pub mod evalx;
pub mod grids;
pub mod quantizer;
pub mod synth;
pub mod tensorio;

pub use error::{Error, Result};
pub use tensorio::{CalibrationSet, GridKind, GroupParams, QuantizedTensor, WeightTensor};
