//! Frequency-aware pansharpening.
//!
//! Fuses a low-resolution multispectral image with a high-resolution
//! panchromatic image through a two-branch network that extracts, aligns
//! and merges features in the wavelet domain. The crate provides the
//! differentiable tensor engine the network runs on, the wavelet layers,
//! the model itself, its losses (reconstruction plus high-frequency
//! feature similarity), the reduced-resolution data simulation pipeline,
//! the standard remote-sensing quality indexes, and a deterministic
//! trainer with checkpointing.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{FafError, Result};
