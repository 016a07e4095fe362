//! Data pipeline for instruction-guided driving-scene editing.
//!
//! Cross-traversal frame pairing, scene annotation through pluggable
//! backends, language-embedded masks (LangMasks) and their binary format,
//! pseudo-pair generation with Poisson blending, quality control, and
//! evaluation metrics.

pub mod backends;
pub mod banks;
pub mod descriptor;
pub mod edges;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod langmask;
pub mod manifest;
pub mod maskio;
pub mod pairing;
pub mod poisson;
pub mod pseudogen;
pub mod qc;
pub mod types;

pub use crate::embed::{EmbeddingProvider, MockEmbedder};
pub use crate::error::{Error, Result};
pub use crate::image::{BBox, Image, Plane};
pub use crate::langmask::{build_langmask, BinaryMask, LangMask};
pub use crate::types::{
    ClassLabel, EditAction, EditSpec, EditType, FramePose, InstanceRecord, LossWeights, SceneAnnotation, TrainingSample,
};
