//! Multimodal mixture-of-experts segmentation at desk scale.
//!
//! A windowed-attention U-shaped network whose block MLPs are replaced by a
//! dense softmax-gated mixture of per-modality experts. The output is a
//! padded projection head from which each sample dynamically selects the
//! logit channels of the classes its modality actually has, so batches can
//! mix modalities freely. Training runs in two phases: masked-autoencoder
//! pre-training of each modality's expert (no gating), then end-to-end
//! segmentation fine-tuning of the assembled mixture model.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod data;
pub mod heads;
pub mod metrics;
pub mod moe;
pub mod nn;
pub mod train;

use std::fmt;

/// Crate-wide error with a coarse machine-readable category, used by the
/// CLI to emit one-line diagnoses.
#[derive(Debug)]
pub enum Error {
    Config(String),
    Data(String),
    Checkpoint(String),
    /// A sample's label indices exceed its modality's class count.
    LabelOutOfRange { sample: usize, pixels: usize, num_classes: usize },
    Autograd(autograd::Error),
    Io(std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::LabelOutOfRange { .. } => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Autograd(autograd::Error::Io(_)) => "io",
            Error::Autograd(autograd::Error::Checkpoint { .. }) => "checkpoint",
            Error::Autograd(_) => "shape",
            Error::Io(_) => "io",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "{m}"),
            Error::Data(m) => write!(f, "{m}"),
            Error::Checkpoint(m) => write!(f, "{m}"),
            Error::LabelOutOfRange { sample, pixels, num_classes } => write!(
                f,
                "sample {sample}: {pixels} pixel labels out of range for {num_classes} classes"
            ),
            Error::Autograd(e) => write!(f, "{e}"),
            Error::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<autograd::Error> for Error {
    fn from(e: autograd::Error) -> Self {
        Error::Autograd(e)
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
