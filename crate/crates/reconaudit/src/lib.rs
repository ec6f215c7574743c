//! reconaudit — privacy audit for vision classifiers.
//!
//! Measures how much a trained classifier memorizes its training data by
//! inverting the frozen model: a conditioned generator is trained against the
//! classifier's weights and input-output behavior to produce training-like
//! samples, which are then matched against real training images with SSIM.
//! Higher nearest-sample SSIM means stronger memorization and weaker privacy.
//!
//! The pipeline is `train-classifier` -> `invert` -> `evaluate`, with
//! `benchmark` orchestrating whole dataset x architecture grids. See the
//! `book/` guide for the concepts and the CLI chapter for file formats.

pub mod checkpoint;
pub mod classifiers;
pub mod commands;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod generator;
pub mod inversion;
pub mod manifest;
pub mod nn;
pub mod tensor;
pub mod util;

/// The guide's code snippets compile and run as doc-tests, so the book in
/// `book/` can never drift from the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(pipeline, "../../../book/src/pipeline.md");
    chapter!(conditioning, "../../../book/src/conditioning.md");
    chapter!(losses, "../../../book/src/losses.md");
    chapter!(gradients, "../../../book/src/gradients.md");
    chapter!(ssim, "../../../book/src/ssim.md");
    chapter!(cli, "../../../book/src/cli.md");
    chapter!(acceptance, "../../../book/src/acceptance.md");
}

use thiserror::Error;

/// Crate-wide error type; the CLI maps variants onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error for {dataset}: {message}")]
    Data { dataset: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("training error at step {step}: {message}")]
    Train { step: usize, message: String },

    #[error("numerical error in {term}: {message}")]
    Numeric { term: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 runtime/numerical,
    /// 4 integrity, per the external contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Contract(_) => 2,
            Error::Integrity(_) => 4,
            _ => 3,
        }
    }
}
