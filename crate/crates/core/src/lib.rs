//! Blind removal of artificial markers from medical images.
//!
//! A two-branch gated-convolution generator predicts both an inpainted image
//! and a soft mask of corrupted pixels, and blends them with the input. It is
//! trained adversarially against a dense anchor-based marker detector that
//! learns to find real markers in corrupted inputs and residual "fake" markers
//! in reconstructions.
//!
//! Module map:
//! - [`marker`]: crosshair/fork rasterisation and stamping.
//! - [`dataset`]: corpus layout, sample loading and batching.
//! - [`generator`]: the mask-free reconstruction network.
//! - [`detector`]: the object-aware discriminator and the patch alternative.
//! - [`perceptual`]: fixed feature extractor for the perceptual term.
//! - [`losses`]: reconstruction, perceptual, adversarial and detection losses.
//! - [`trainer`]: alternating optimisation, checkpoints and snapshots.
//! - [`metrics`]: PSNR/SSIM/MSE, full-image and inside marker boxes.

pub mod config;
pub mod dataset;
pub mod detector;
pub mod generator;
pub mod imaging;
pub mod losses;
pub mod marker;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use imaging::{Image, Mask};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] autograd::Error),
    #[error("invalid marker spec: {0}")]
    InvalidMarker(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("failed to read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error in field `{field}`: {detail}")]
    Checkpoint { field: String, detail: String },
    #[error("non-finite loss at step {step}: {report}")]
    NonFinite { step: u64, report: String },
    #[error("metrics error: {0}")]
    Metrics(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
