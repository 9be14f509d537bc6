//! Sequential two-stage inference: tile, propose with the detector, crop
//! each candidate from the full image and keep it only when the classifier
//! confirms it.

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classifier::PatchScorer;
use crate::dataset::{extract_patch, resize_to_input, ImageSample, INPUT_SIDE, PATCH_SIDE};
use crate::detector::{nms, DecoderConfig, Proposer};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{detection_metrics, DetectionMetrics, ThresholdMode};
use crate::types::{Detection, PointAnnotation, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub detector_thresh: f64,
    pub classifier_thresh: f64,
    pub tile_size: u32,
    pub tile_overlap: u32,
    pub dedupe_radius: f64,
    pub patch_side: u32,
    pub decoder: DecoderConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            detector_thresh: 0.5,
            classifier_thresh: 0.5,
            tile_size: 512,
            tile_overlap: 64,
            dedupe_radius: 7.5,
            patch_side: PATCH_SIDE,
            decoder: DecoderConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("detector threshold", self.detector_thresh), ("classifier threshold", self.classifier_thresh)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.tile_overlap >= self.tile_size {
            return Err(Error::Config(format!(
                "tile overlap {} must be smaller than tile size {}",
                self.tile_overlap, self.tile_size
            )));
        }
        if !(self.dedupe_radius >= 0.0) {
            return Err(Error::Config(format!("dedupe radius must be non-negative, got {}", self.dedupe_radius)));
        }
        if self.patch_side == 0 {
            return Err(Error::Config("patch side must be positive".into()));
        }
        self.decoder.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub pixels: RgbImage,
    /// Top-left corner in the image frame.
    pub offset: (u32, u32),
}

/// Tile starts along one axis: stride `tile - overlap`, last tile flush
/// with the far edge.
fn tile_starts(len: u32, tile: u32, overlap: u32) -> Vec<u32> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut starts = Vec::new();
    let mut p = 0;
    while p + tile < len {
        starts.push(p);
        p += step;
    }
    starts.push(len - tile);
    starts.dedup();
    starts
}

/// Split an image into overlapping tiles in row-major order. Images
/// smaller than a tile along an axis get one tile spanning that axis.
pub fn tile_image(image: &RgbImage, tile_size: u32, overlap: u32) -> Result<Vec<Tile>> {
    if tile_size == 0 || overlap >= tile_size {
        return invalid(format!("need tile_size > overlap >= 0, got {tile_size} and {overlap}"));
    }
    let (w, h) = image.dimensions();
    let mut tiles = Vec::new();
    for &y in &tile_starts(h, tile_size, overlap) {
        for &x in &tile_starts(w, tile_size, overlap) {
            let pixels = imageops::crop_imm(image, x, y, tile_size.min(w), tile_size.min(h)).to_image();
            tiles.push(Tile { pixels, offset: (x, y) });
        }
    }
    Ok(tiles)
}

/// Keep the best-ranked detection among any group whose centres lie
/// within `radius` of an already kept one.
pub fn dedupe(dets: &[Detection], radius: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(Detection::rank_cmp);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let (x, y) = d.center();
        let close = kept.iter().any(|k| {
            let (kx, ky) = k.center();
            (kx - x).hypot(ky - y) <= radius
        });
        if !close {
            kept.push(d);
        }
    }
    kept
}

/// Stage 1 over the whole image: per-tile proposals mapped to the image
/// frame, thresholded at the detector threshold and deduplicated.
pub fn detect_candidates(image: &RgbImage, image_id: &str, detector: &dyn Proposer, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut all = Vec::new();
    for tile in tile_image(image, cfg.tile_size, cfg.tile_overlap)? {
        let (ox, oy) = (tile.offset.0 as f64, tile.offset.1 as f64);
        let found = detector
            .propose(&tile.pixels, image_id, &cfg.decoder)
            .map_err(|e| e.context(format!("detector on {image_id} tile at ({ox}, {oy})")))?;
        all.extend(found.into_iter().filter(|d| d.score >= cfg.detector_thresh).map(|mut d| {
            d.bbox = d.bbox.translate(ox, oy);
            d.stage = Stage::Detector;
            d
        }));
    }
    Ok(dedupe(&nms(&all, cfg.decoder.nms_iou), cfg.dedupe_radius))
}

/// Fixed-size patch at a candidate's centre, resized to the classifier input.
pub fn candidate_patch(image: &RgbImage, image_id: &str, candidate: &Detection, patch_side: u32) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    let (cx, cy) = candidate.center();
    let center = (cx.clamp(0.0, (w - 1) as f64), cy.clamp(0.0, (h - 1) as f64));
    let patch = extract_patch(image, image_id, center, patch_side, None)?;
    resize_to_input(&patch.pixels, INPUT_SIDE)
}

/// Stage 2: score each candidate's patch and keep those at or above the
/// classifier threshold. Retained detections carry the classifier
/// probability as their score.
pub fn refine_candidates<F>(image: &RgbImage, candidates: &[Detection], score: F, cfg: &PipelineConfig) -> Result<Vec<Detection>>
where
    F: Fn(&Detection, &RgbImage) -> Result<f64>,
{
    let mut kept = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let patch = candidate_patch(image, &c.image_id, c, cfg.patch_side)?;
        let prob = score(c, &patch).map_err(|e| {
            let (x, y) = c.center();
            e.context(format!("classifier on candidate {i} of {} at ({x:.1}, {y:.1})", c.image_id))
        })?;
        if prob >= cfg.classifier_thresh {
            kept.push(Detection { score: prob, stage: Stage::Pipeline, ..c.clone() });
        }
    }
    kept.sort_by(Detection::rank_cmp);
    Ok(kept)
}

pub fn run_two_stage(
    image: &RgbImage,
    image_id: &str,
    detector: &dyn Proposer,
    classifier: &dyn PatchScorer,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>> {
    let candidates = detect_candidates(image, image_id, detector, cfg)?;
    refine_candidates(image, &candidates, |_, p| classifier.predict_proba(p), cfg)
}

/// Detector-only versus two-stage metrics under the same matching radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub detector: DetectionMetrics,
    pub pipeline: DetectionMetrics,
}

impl CascadeReport {
    pub fn f1_gain(&self) -> f64 {
        self.pipeline.f1 - self.detector.f1
    }
}

/// Compare already-produced outputs of both stages. Each output set is
/// scored in full (every listed detection counts).
pub fn compare_stages(gts: &[PointAnnotation], detector: &[Detection], pipeline: &[Detection], radius: f64) -> Result<CascadeReport> {
    let all = ThresholdMode::Fixed(0.0);
    Ok(CascadeReport {
        detector: detection_metrics(detector, gts, radius, all)?.0,
        pipeline: detection_metrics(pipeline, gts, radius, all)?.0,
    })
}

/// Both stages over a labelled validation set.
pub fn filter_pipeline_f1_gain(
    val: &[ImageSample],
    detector: &dyn Proposer,
    classifier: &dyn PatchScorer,
    cfg: &PipelineConfig,
    radius: f64,
) -> Result<CascadeReport> {
    if val.is_empty() {
        return invalid("validation set is empty");
    }
    let mut det_all = Vec::new();
    let mut pipe_all = Vec::new();
    let mut gts = Vec::new();
    for s in val {
        let id = &s.record.image_id;
        let candidates = detect_candidates(&s.pixels, id, detector, cfg)?;
        pipe_all.extend(refine_candidates(&s.pixels, &candidates, |_, p| classifier.predict_proba(p), cfg)?);
        det_all.extend(candidates);
        gts.extend(s.annotations.iter().cloned());
    }
    compare_stages(&gts, &det_all, &pipe_all, radius)
}
