//! Physics-guided MRI reconstruction from undersampled multi-coil k-space.
//!
//! The model alternates selective state-space blocks over patch tokens with
//! hard data-consistency blocks that re-impose acquired k-space samples, and
//! is trained end to end through a tape-based reverse-mode autodiff engine.
//! Everything runs in f64 on the CPU and is deterministic under fixed seeds.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dc;
pub mod erf;
pub mod error;
pub mod forward_model;
pub mod fourier;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod net;
pub mod pgm;
pub mod phantom;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod tensorfile;
pub mod vssm;

pub use error::{Error, Result};
