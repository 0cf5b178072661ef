//! Memory-based 3D single-object tracking on LiDAR point clouds.
//!
//! The pipeline crops a search region around the previous box, embeds it
//! with an edge-convolution [`backbone`], propagates geometric and
//! targetness cues from a [`defpm::MemoryBank`] of past frames, and localizes
//! the target with the box-prior network in [`bploc`]. [`tracker`] runs the
//! online loop, [`train`] fits the parameters and [`eval`] scores tracks
//! with the one-pass protocol.

pub mod autograd;
pub mod backbone;
pub mod bploc;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defpm;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tracker;
pub mod train;

use std::path::PathBuf;

pub use geometry::{Box3D, Motion4DOF, PointCloud, TargetnessMask};
pub use tensor::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("need at least {need} points, got {have}")]
    TooFewPoints { have: usize, need: usize },
    #[error("cannot sample {requested} proposals from {available} centers")]
    ProposalCount { requested: usize, available: usize },
    #[error("memory bank is empty")]
    EmptyMemory,
    #[error("search region contains no points")]
    EmptyCrop,
    #[error("attention dimension must be positive")]
    ZeroDim,
    #[error("metric input is empty")]
    EmptyMetric,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing point file {0}")]
    MissingFrame(PathBuf),
    #[error("malformed label at {path}:{line}: {msg}")]
    MalformedLabel {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("track id {0} does not occur in the label file")]
    UnknownTrack(i64),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
