//! Two-stage classifier for high-resolution images: a patch-wise residual
//! network produces per-patch class probabilities, which are arranged into
//! a spatially ordered probability map and fused into an image-wise
//! prediction by a small MLP (with vote-based fusers as baselines).
//!
//! The crate is organized along the pipeline:
//!
//! - [`tensor`]: dense `f64` tensors with reverse-mode autodiff
//! - [`stain`]: Macenko stain normalization for H&E-style color variance
//! - [`tiling`]: patch extraction, augmentation, synthetic datasets
//! - [`patchnet`]: the adapted 18-layer residual network
//! - [`fusion`]: probability maps, the spatial fusion MLP, vote fusers
//! - [`train`]: Adam, the two training stages, checkpoint I/O
//! - [`eval`]: metrics, ROC/AUC, stratified k-fold cross-validation

pub mod error;
pub mod eval;
pub mod fusion;
pub mod init;
pub mod patchnet;
pub mod report;
pub mod stain;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
