// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, configuration and experiment orchestration around `kedit-core`.

pub mod archive;
pub mod artifacts;
pub mod config;
pub mod pipeline;

use std::path::{Path, PathBuf};

pub use kedit_core as core;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("archive format version {found}, expected {expected}")]
    Version { found: String, expected: String },
    #[error("archive truncated in tensor {tensor}: needs {needed} payload bytes, has {available}")]
    Truncated {
        tensor: String,
        needed: usize,
        available: usize,
    },
    #[error("tensor {tensor}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("config: {0}")]
    Config(String),
    #[error("missing {what}: expected {path}")]
    Missing { what: &'static str, path: PathBuf },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] kedit_core::model::ModelError),
    #[error(transparent)]
    World(#[from] kedit_core::world::WorldError),
    #[error(transparent)]
    Train(#[from] kedit_core::train::TrainError),
    #[error(transparent)]
    Experiment(#[from] kedit_core::experiment::ExperimentError),
}

impl LabError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, message: impl std::fmt::Display) -> Self {
        LabError::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Io { .. } => "io",
            LabError::Format(_) | LabError::Version { .. } | LabError::Truncated { .. } => "format",
            LabError::ShapeMismatch { .. } => "shape",
            LabError::Config(_) => "config",
            LabError::Missing { .. } => "missing_artifact",
            LabError::Parse { .. } => "parse",
            LabError::Model(_) => "model",
            LabError::World(_) => "world",
            LabError::Train(_) => "train",
            LabError::Experiment(_) => "experiment",
        }
    }
}
