//! Pipeline driver for distilled linearized task arithmetic experiments.

use std::path::{Path, PathBuf};

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod lab;
pub mod manifest;
pub mod output;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] delta_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("output directory {0} is not empty; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error("{0}")]
    Unsupported(String),
    #[error("incompatible runs: {0}")]
    Incompatible(String),
    #[error("missing input: {0}")]
    Missing(String),
}

impl LabError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit status: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use delta_core::ErrorClass;
        match self {
            LabError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            },
            LabError::OutputExists(_) | LabError::Unsupported(_) => 2,
            LabError::Io { .. } | LabError::Incompatible(_) | LabError::Missing(_) => 3,
        }
    }
}

/// Applies `DELTA_LAB_THREADS` (or the given count) to the global worker pool.
pub fn init_threads(flag: Option<usize>) {
    let env = std::env::var("DELTA_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = env.or(flag).filter(|&n| n > 0) {
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
