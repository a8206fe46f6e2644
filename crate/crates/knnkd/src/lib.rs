//! Nearest-neighbor knowledge distillation for a toy translation model, end to end.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`corpus`]: vocabularies, parallel corpora, and a synthetic
//!   many-valid-targets translation task with an oracle sidecar.
//! - [`model`]: a small recurrent encoder-decoder with dot-product attention,
//!   hand-written backprop, Adam with inverse-sqrt warmup, and beam search.
//! - [`datastore`]: the (hidden-state key, target token value) store built by
//!   running the model over the training set, persisted in a checksummed,
//!   memory-mappable file.
//! - [`knn`]: exact (and optional inverted-file) L2 search over the datastore,
//!   plus the offline batch search that writes per-position neighbor files.
//! - [`distill`]: the kNN teacher distribution, the distillation losses, and
//!   the analytic logit gradient used both in training and as a test oracle.
//! - [`knnmt`]: the retrieve-and-interpolate decoding baseline.
//! - [`evalbench`]: corpus BLEU, the overcorrection probe, and throughput
//!   measurement.
//! - [`pipeline`]: stage orchestration with run manifests; the `knnkd` binary
//!   is a thin wrapper over this module.
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `examples/full_pipeline.rs`.

pub mod corpus;
pub mod datastore;
pub mod distill;
pub mod evalbench;
pub mod knn;
pub mod knnmt;
pub mod model;
pub mod pipeline;
pub mod util;

use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped so the CLI can map them onto
/// its documented exit codes (usage 2, artifact 3, numerical 4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("incompatible artifact: {0}")]
    ArtifactMismatch(String),

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("format version mismatch in {path}: found {found}, expected {expected}")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EmptyCorpus | Error::InvalidArgument(_) | Error::TokenOutOfRange { .. } => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
