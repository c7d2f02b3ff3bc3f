//! Multiview multimodal feature fusion with supervised momentum-contrastive training.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine over dense `f64` arrays.
//! - [`nn`]: parameter storage, linear layers, normalization, multi-head self-attention.
//! - [`backbone`]: per-source residual 3D CNN feature extractors.
//! - [`fusion`]: Sum, Conv, SE, AFF and masked MHSA fusion, one- and two-step.
//! - [`sumoco`]: contrast queue, infoNCE, focal loss, momentum updates, training loop, checkpoints.
//! - [`data`]: clip files, manifests, synthetic generator, sampling and augmentation.
//! - [`eval`]: AUC-ROC, AP/mAP, confusion matrices, decision fusion, collapse sweeps.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradsuite;
pub mod nn;
pub mod sumoco;
pub mod tensor;

pub use error::{Error, Result};
