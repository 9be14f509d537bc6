//! Two-stage mitotic-figure detection and atypical-mitosis classification.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the single-precision variants used by the CLI.

pub mod checkpoint;
pub mod classifier;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
mod scalar;
pub mod synthetic;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use scalar::{lit, Scalar};
pub use types::{iou, point_to_box, BBox, Category, Detection, ImageRecord, PointAnnotation, Stage, Subtype};

pub type Classifier = classifier::PatchClassifier<f32>;
pub type Detector = detector::DetectorModel<f32>;
