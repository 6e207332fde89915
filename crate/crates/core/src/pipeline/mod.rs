//! Orchestration, dataset I/O, configuration, and evaluation metrics.

mod config;
mod dataset;
mod map;
mod metrics;
mod run;

pub use config::{Config, EnvMode, SensorKind};
pub use dataset::{
    load_dataset, read_scan_file, read_trajectory, write_ply, write_trajectory, Dataset,
};
pub use map::{voxel_downsample, Keyframe, KeyframeStore};
pub use metrics::{evaluate, evaluate_with, umeyama_align, Metrics};
pub use run::{export_map, run_slam, RunArtifacts};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("missing file {0}")]
    MissingFile(std::path::PathBuf),
    #[error("unknown config key {key:?} on line {line}")]
    UnknownConfigKey { line: usize, key: String },
    #[error("bad value for {key:?} on line {line}: {message}")]
    BadConfigValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("loop closure enabled but no loop.model configured")]
    MissingLoopModel,
    #[error("localization lost at scan {scan_index}; last estimate ({}, {}, {})", last_estimate.0, last_estimate.1, last_estimate.2)]
    LocalizationLost {
        scan_index: usize,
        last_estimate: (f64, f64, f64),
    },
    #[error("only {found} associated pose pairs; need at least 2")]
    TooFewAssociations { found: usize },
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Deskew(#[from] crate::deskew::DeskewError),
    #[error(transparent)]
    Psf(#[from] crate::psf::PsfError),
    #[error(transparent)]
    Graph(#[from] crate::pose_graph::GraphError),
    #[error(transparent)]
    Loop(#[from] crate::loopnet::LoopError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit status for the CLI: 0 success, 2 localization lost,
    /// 3 malformed input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::LocalizationLost { .. } => 2,
            Self::Parse { .. }
            | Self::MissingFile(_)
            | Self::UnknownConfigKey { .. }
            | Self::BadConfigValue { .. }
            | Self::MissingLoopModel
            | Self::Loop(crate::loopnet::LoopError::BadModelFile(_)) => 3,
            _ => 1,
        }
    }
}
