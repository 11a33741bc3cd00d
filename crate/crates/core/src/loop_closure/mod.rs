//! Place recognition, loop validation, pose-graph correction and map fusion.

mod bow;
mod closure;
mod pgo;

pub use bow::*;
pub use closure::*;
pub use pgo::*;

use thiserror::Error;

use crate::map::KeyFrameId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoopError {
    #[error("no point or line features to score")]
    NoFeatures,
    #[error("keyframe {0} is not in the database")]
    UnknownKeyFrame(KeyFrameId),
    #[error("pose graph is disconnected")]
    Disconnected,
    #[error("pose-graph optimization diverged")]
    Diverged,
    #[error("no loop edges supplied")]
    NoLoopEdges,
}
