//! Anchor-free first-stage detector: target encoding, decoding, NMS, the
//! reference model and its training harness.

mod loss;
mod model;
mod targets;
mod train;

pub use loss::{focal, head_loss, head_to_predictions, iou_loss, LossParts, FOCAL_ALPHA, FOCAL_GAMMA, HEAD_CHANNELS};
pub use model::{reference_detector_layers, DetectorCache, DetectorModel, DetectorSettings, Proposer};
pub use targets::{
    centerness, decode_detections, encode_targets, grid_shape, location, nms, targets_as_predictions, DecoderConfig,
    LevelPredictions, LevelTargets, PredictionMaps, TargetMaps,
};
pub use train::{detector_f1, train_detector, DetectorTrainConfig};
