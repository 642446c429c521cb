//! Fusion of semantic and instance nuclei segmentations, with panoptic-quality
//! evaluation, deterministic augmentation and synthetic test scenes.

pub mod augment;
pub mod cli;
pub mod detection;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod scene;
pub mod synth;

pub use detection::{extract_detections, relabel_components, Detection, DetectionSet};
pub use error::{Error, Result};
pub use fusion::{fuse, FusionConfig, Producer, VotingWeights};
pub use geometry::{bbox_iou, mask_iou, BBox, Mask, Point};
pub use scene::{ClassId, LabeledScene, Source, NUM_CLASSES};
