//! Anchor-free target encoding, prediction decoding and NMS.
//!
//! Grid cell `(i, j)` of a level with stride `s` sits at image location
//! `(j*s + s/2, i*s + s/2)`. A location is positive for a box when it lies
//! strictly inside the box and within `center_radius * s` (per axis) of the
//! box centre; when several boxes qualify the smallest one wins. Regression
//! targets are the distances `(l, t, r, b)` to the four box sides.

use serde::{Deserialize, Serialize};

use crate::classifier::sigmoid_unchecked;
use crate::error::{invalid, Result};
use crate::scalar::{lit, Scalar};
use crate::types::{iou, BBox, Detection, Stage};

/// Grid rows and columns for an image of `(width, height)` at `stride`.
pub fn grid_shape(image_size: (u32, u32), stride: usize) -> (usize, usize) {
    ((image_size.1 as usize).div_ceil(stride), (image_size.0 as usize).div_ceil(stride))
}

/// Image-frame location of grid cell `(row, col)`.
#[inline]
pub fn location(stride: usize, row: usize, col: usize) -> (f64, f64) {
    let half = stride as f64 / 2.0;
    ((col * stride) as f64 + half, (row * stride) as f64 + half)
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`.
pub fn centerness<T: Scalar>(ltrb: [T; 4]) -> T {
    let [l, t, r, b] = ltrb;
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Targets for one grid level. At negative locations the box target is NaN
/// and centerness is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets<T> {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub cls: Vec<u8>,
    pub boxes: Vec<[T; 4]>,
    pub centerness: Vec<T>,
}

impl<T> LevelTargets<T> {
    pub fn num_positive(&self) -> usize {
        self.cls.iter().filter(|&&c| c == 1).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps<T> {
    pub levels: Vec<LevelTargets<T>>,
}

impl<T> TargetMaps<T> {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_positive).sum()
    }
}

pub fn encode_targets<T: Scalar>(
    image_size: (u32, u32),
    boxes: &[BBox],
    strides: &[usize],
    center_radius: f64,
) -> Result<TargetMaps<T>> {
    if strides.is_empty() || strides.contains(&0) {
        return invalid("strides must be a non-empty list of positive values");
    }
    if !(center_radius > 0.0 && center_radius.is_finite()) {
        return invalid(format!("center_radius must be positive, got {center_radius}"));
    }
    if let Some(i) = boxes.iter().position(|b| !b.is_valid()) {
        return invalid(format!("box {i} is not a valid box"));
    }
    let frame = BBox { x_min: 0.0, y_min: 0.0, x_max: image_size.0 as f64, y_max: image_size.1 as f64 };
    let inside: Vec<&BBox> = boxes
        .iter()
        .filter(|b| {
            let keep = b.intersection_area(&frame) > 0.0;
            if !keep {
                log::warn!("box {b:?} lies outside the {}x{} image and yields no targets", image_size.0, image_size.1);
            }
            keep
        })
        .collect();

    let mut levels = Vec::with_capacity(strides.len());
    for &stride in strides {
        let (h, w) = grid_shape(image_size, stride);
        let mut cls = vec![0u8; h * w];
        let mut targets = vec![[T::nan(); 4]; h * w];
        let mut ctr = vec![T::zero(); h * w];
        let mut best_area = vec![f64::INFINITY; h * w];
        let reach = center_radius * stride as f64;
        for b in &inside {
            let (cx, cy) = b.center();
            let area = b.area();
            // Only cells near the centre can qualify.
            let col_lo = ((cx - reach - stride as f64) / stride as f64).floor().max(0.0) as usize;
            let row_lo = ((cy - reach - stride as f64) / stride as f64).floor().max(0.0) as usize;
            let col_hi = (((cx + reach) / stride as f64).ceil().max(0.0) as usize + 1).min(w);
            let row_hi = (((cy + reach) / stride as f64).ceil().max(0.0) as usize + 1).min(h);
            for row in row_lo..row_hi {
                for col in col_lo..col_hi {
                    let (x, y) = location(stride, row, col);
                    if (x - cx).abs() >= reach || (y - cy).abs() >= reach {
                        continue;
                    }
                    let ltrb = [x - b.x_min, y - b.y_min, b.x_max - x, b.y_max - y];
                    if ltrb.iter().any(|&d| d <= 0.0) {
                        continue;
                    }
                    let k = row * w + col;
                    if area < best_area[k] {
                        best_area[k] = area;
                        cls[k] = 1;
                        let t = ltrb.map(lit::<T>);
                        targets[k] = t;
                        ctr[k] = centerness(t);
                    }
                }
            }
        }
        levels.push(LevelTargets { stride, height: h, width: w, cls, boxes: targets, centerness: ctr });
    }
    Ok(TargetMaps { levels })
}

/// Raw network outputs for one level. `boxes` are distances in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPredictions<T> {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub cls_logit: Vec<T>,
    pub boxes: Vec<[T; 4]>,
    pub ctr_logit: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps<T> {
    pub levels: Vec<LevelPredictions<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub score_thresh: f64,
    pub pre_nms_topk: usize,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { score_thresh: 0.05, pre_nms_topk: 1000, nms_iou: 0.5, max_detections: 100 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return invalid(format!("score_thresh must lie in [0, 1], got {}", self.score_thresh));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return invalid(format!("nms_iou must lie in (0, 1), got {}", self.nms_iou));
        }
        if self.pre_nms_topk == 0 || self.max_detections == 0 {
            return invalid("pre_nms_topk and max_detections must be positive");
        }
        Ok(())
    }
}

/// Turn predicted grids into scored boxes, keeping at most `pre_nms_topk`.
/// Score is `sigmoid(cls) * sigmoid(centerness)`.
pub fn decode_detections<T: Scalar>(
    maps: &PredictionMaps<T>,
    image_id: &str,
    score_thresh: f64,
    pre_nms_topk: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (li, level) in maps.levels.iter().enumerate() {
        let n = level.height * level.width;
        if level.stride == 0 || level.cls_logit.len() != n || level.boxes.len() != n || level.ctr_logit.len() != n {
            return invalid(format!(
                "level {li}: grid is {}x{} but holds {} class, {} box and {} centerness entries",
                level.height,
                level.width,
                level.cls_logit.len(),
                level.boxes.len(),
                level.ctr_logit.len()
            ));
        }
        for row in 0..level.height {
            for col in 0..level.width {
                let k = row * level.width + col;
                let score = sigmoid_unchecked(level.cls_logit[k].as_f64()) * sigmoid_unchecked(level.ctr_logit[k].as_f64());
                if !(score >= score_thresh) {
                    continue;
                }
                let (x, y) = location(level.stride, row, col);
                let [l, t, r, b] = level.boxes[k].map(Scalar::as_f64);
                let bbox = BBox { x_min: x - l, y_min: y - t, x_max: x + r, y_max: y + b };
                if !bbox.is_valid() {
                    continue;
                }
                out.push(Detection { image_id: image_id.to_string(), bbox, score, stage: Stage::Detector });
            }
        }
    }
    out.sort_by(Detection::rank_cmp);
    out.truncate(pre_nms_topk);
    Ok(out)
}

/// Greedy non-maximum suppression. Output is sorted by descending score,
/// ties broken by lexicographic box order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(Detection::rank_cmp);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Exact targets written as predictions: strong logits at positives and
/// the target distances as boxes.
pub fn targets_as_predictions<T: Scalar>(targets: &TargetMaps<T>, logit: f64) -> PredictionMaps<T> {
    let big = lit::<T>(logit);
    PredictionMaps {
        levels: targets
            .levels
            .iter()
            .map(|lv| LevelPredictions {
                stride: lv.stride,
                height: lv.height,
                width: lv.width,
                cls_logit: lv.cls.iter().map(|&c| if c == 1 { big } else { -big }).collect(),
                boxes: lv.boxes.iter().map(|b| if b[0].is_finite() { *b } else { [T::one(); 4] }).collect(),
                ctr_logit: lv.cls.iter().map(|&c| if c == 1 { big } else { -big }).collect(),
            })
            .collect(),
    }
}
