use std::path::PathBuf;

use crate::geometry::FrameTag;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("cannot compose: inner frames {left:?} and {right:?} differ")]
    FrameMismatch { left: FrameTag, right: FrameTag },
    #[error("gripper is open")]
    GripperOpen,
    #[error("part is entirely off the tactile sensor")]
    OffSensor,
    #[error("every refinement candidate tripped the force guard")]
    AllCandidatesBlocked,
    #[error("part not free after {0} unplug iterations")]
    ZminNotFound(usize),
    #[error("force guard tripped during {0}")]
    GuardTrip(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("model: {0}")]
    Model(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
