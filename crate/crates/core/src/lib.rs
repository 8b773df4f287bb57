//! Unsupervised optical-flow estimation for driving scenes with per-pixel
//! semantic maps as additional network inputs.
//!
//! The pipeline: a shared semantic encoder and an iterative residual decoder
//! with a learned convex upsampler ([`model`]), trained with a three-pass
//! self-supervision scheme — occlusion-masked photometric loss, an
//! appearance/spatial augmentation pass, and a semantic copy-paste
//! augmentation pass driven by an occluder cache ([`losses`], [`augment`],
//! [`trainer`]). Synthetic scenes with exact ground truth, file codecs, and
//! EPE/Fl evaluation live in [`data`] and [`eval`].

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
