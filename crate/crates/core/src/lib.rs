//! Synthesis of a missing MRI sequence from the three available ones.
//!
//! The crate covers the whole pipeline: NIfTI case I/O, histogram
//! standardization and MinMax scaling, a synthetic phantom generator, 2.5D
//! nine-channel slice stacks with online augmentation, a U-Net generator and
//! spectrally normalized patch discriminator trained with any weighted mix of
//! six objectives, nine-orientation fusion at inference, and masked SSIM/PSNR
//! evaluation in tumor and healthy tissue.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod par;
pub mod volume;
pub mod preprocess;
pub mod phantom;
pub mod dataset;
pub mod nn;
pub mod losses;
pub mod fusion;
pub mod metrics;
pub mod trainer;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
