//! Outlier-aware post-training quantization toolkit.
//!
//! - [`numerics`]: dense matrices, seeded outlier sampling, entropy helpers, file formats
//! - [`quantizer`]: uniform affine quantization and bin-occupancy metrics
//! - [`error_model`]: analytic quantization-error predictors and a Monte-Carlo validator
//! - [`flatness`]: the Flatness objective and its optimal bidirectional diagonal scaling
//! - [`transforms`]: Hadamard/Cayley rotations, transform pairs, Kronecker baseline
//! - [`calibration`]: toy network, CE / RCE losses and diagonal calibration
//! - [`harness`]: pipeline comparison, validation suites and report emission

pub mod error;
pub mod numerics;
pub mod quantizer;
pub mod error_model;
pub mod flatness;
pub mod oracle;
pub mod transforms;
pub mod calibration;
pub mod harness;

pub use error::{BdqError, Result};
pub use numerics::{Matrix, OutlierProfile};
