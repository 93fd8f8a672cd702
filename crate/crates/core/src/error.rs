use alloc::boxed::Box;
use alloc::string::String;

use thiserror::Error;

use crate::skeleton::Pose;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    FaceIndex { face: usize, index: usize, count: usize },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale field snapshot: gradient recorded at version {recorded}, field is at version {current}")]
    StaleSnapshot { recorded: u64, current: u64 },
    #[error("guidance channel `{channel}` failed: {message}")]
    Provider {
        channel: String,
        message: String,
        timed_out: bool,
    },
    #[error("insufficient keypoints: {0}")]
    InsufficientKeypoints(String),
    #[error("pose fit diverged after {iterations} iterations")]
    Diverged { iterations: usize, last: Box<Pose> },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
