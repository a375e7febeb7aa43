//! Pseudo multi-perspective segmentation on a desk-scale budget.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, RNG, kernels, reverse-mode graph, finite differences.
//! - [`contourlet`]: Laplacian pyramid plus directional filter bank texture features.
//! - [`codec`]: perspective encoder (texture + point/descriptor heads) and all-MLP decoder.
//! - [`bank`]: online perspective prototypes, mixture affinity and pseudo-perspective generation.
//! - [`attention`]: iterative cross-perspective attention chain and calibration.
//! - [`model`]: the assembled segmenter, losses, optimizer and checkpoints.
//! - [`experiments`]: synthetic viewpoint data, augmentation baselines, mIoU and ablations.

pub mod attention;
pub mod bank;
pub mod codec;
pub mod contourlet;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
