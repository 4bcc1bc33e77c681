pub mod error;
pub mod exec;
pub mod geometry;
pub mod learn;
pub mod pipeline;
pub mod scene;
pub mod sensors;
pub mod bench;
pub mod collect;
pub mod contact;
pub mod refine;

pub use error::{Error, Result};
pub use geometry::{FrameTag, FramedPose, Pose};
