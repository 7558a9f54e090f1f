//! CPU engine for dense-output convolutional networks on anisotropic 3D image
//! stacks, plus a neuronal-boundary-detection pipeline built on top of it.
//!
//! The engine keeps every feature map at full resolution: pooling is replaced
//! by max-filtering (a sliding maximum) and all downstream filters become
//! sparse, sampling their taps on a stride that grows with each max-filtering.
//! The result of running such a network over a large volume equals running the
//! equivalent sliding-window max-pooling network independently at every output
//! location, at a fraction of the cost.
//!
//! Crate layout:
//! - [`tensor`]: dense volumes and in-plane dihedral transforms
//! - [`conv`]: sparse convolution (direct and FFT), max-filtering, backward
//!   passes, and per-layer direct/FFT self-tuning
//! - [`net`]: network specs, validation, sparsity/field-of-view inference,
//!   parameters
//! - [`exec`]: whole-graph forward and backward over dense feature maps
//! - [`train`]: patch sampling, class rebalancing, SGD, the recursive
//!   two-stage protocol, and tiled inference
//! - [`eval`]: pixel error, 2D segmentation back-ends, Rand scores
//! - [`data`]: volume/segmentation file I/O, checkpoints, synthetic stacks

pub mod conv;
pub mod data;
pub mod eval;
pub mod exec;
pub mod net;
pub mod tensor;
pub mod train;

mod fft;

use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("network spec error: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("internal consistency error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
