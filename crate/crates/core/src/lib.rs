//! Texture-aware camouflaged-object segmentation toolkit.
//!
//! The crate implements the full desk-scale pipeline: a dense f64 tensor
//! core with reverse-mode differentiation, the texture-aware refinement
//! module (TARM) built on per-pixel covariance descriptors, affinity and
//! boundary-consistency losses, a small multi-scale segmentation network
//! with an SGD/poly training loop, a procedural camouflage benchmark
//! generator, and the standard four segmentation metrics.

pub mod data;
pub mod edt;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod params;
pub mod io;
pub mod rng;
pub mod synth;
pub mod tarm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{PoolMode, Tape, TensorId};
