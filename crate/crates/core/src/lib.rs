//! Late fusion of RGB and thermal pedestrian detections, with a language
//! model scoring each cross-modal pair from marked image crops.
//!
//! The stages, in pipeline order:
//!
//! * [`pairing`] matches RGB and thermal boxes of one image.
//! * [`vcm`] crops each pair's neighbourhood and marks the box in green.
//! * [`language`] asks a chat model to describe the crops and score them.
//! * [`fusion`] merges vision and language scores and boxes.
//! * [`evaluation`] computes AP and log-average miss rate.
//! * [`pipeline`] wires the stages together over JSON files.

pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod language;
pub mod pairing;
pub mod pipeline;
pub mod vcm;

pub use evaluation::{evaluate, EvalReport, GroundTruthBox};
pub use fusion::{FusedDetection, FusionConfig};
pub use geometry::{iou, BBox, Detection, Modality};
pub use pairing::{dpair, PairedDetection, PairingConfig};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineError};
