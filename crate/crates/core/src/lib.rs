//! Diffusion tensor metric estimation from sparsely sampled DWI.
//!
//! The crate covers a synthetic phantom and acquisition simulator, the
//! log-linear tensor fit, direction subsampling, a small MLP with manual
//! backprop, a singular-value regularized loss with an adaptive weight, the
//! training and evaluation pipeline, and raw volume I/O.

pub mod ablation;
pub mod dti;
pub mod eigen;
pub mod error;
pub mod io;
pub mod mlp;
pub mod nala;
pub mod patches;
pub mod phantom;
pub mod quality;
pub mod render;
pub mod sampling;
pub mod svdreg;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use phantom::TensorField;
pub use types::{Dims, DwiVolume, GradientScheme, Metric, MetricMaps, Patch};
