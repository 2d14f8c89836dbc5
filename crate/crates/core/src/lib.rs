//! Online zero-shot 3D instance segmentation from streaming RGB-D frames
//! with class-agnostic 2D masks.

pub mod assign;
pub mod error;
pub mod eval;
pub mod frame;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod prototype;
pub mod qim;
pub mod refiner;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use frame::{FrameRecord, InstanceMask, PatchMaskSet};
pub use geometry::{Aabb, Intrinsics, Pose, Vec3};
pub use model::{DecoderWeights, ModelConfig};
pub use prototype::{ConcatFeatureMap, Query};
