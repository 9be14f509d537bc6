use image::imageops;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossParts;
use super::model::{DetectorModel, DetectorSettings};
use super::targets::{encode_targets, DecoderConfig};
use crate::dataset::{augment_scene, AugmentationConfig, ImageSample, Task, TrainingProfile, BOX_SIDE};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{f1_from_counts, match_detections, DEFAULT_MATCH_RADIUS};
use crate::nn::{Normalization, Optimizer};
use crate::scalar::Scalar;
use crate::training::{ensure_finite, EpochRecord, TrainingLog};
use crate::types::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub profile: TrainingProfile,
    pub seed: u64,
    /// Side of the square training crops; smaller images are used whole.
    pub crop_size: u32,
    /// Side of the square box placed around each point annotation.
    pub box_side: f64,
    pub center_radius: f64,
    pub strides: Vec<usize>,
    pub augmentation: AugmentationConfig,
    /// Random crops per image per epoch in addition to one per mitosis.
    pub background_crops: usize,
    pub val_radius: f64,
    /// Score threshold for the per-epoch validation F1.
    pub val_score_thresh: f64,
    pub decoder: DecoderConfig,
    /// Fixed input statistics; `None` computes them from the training images.
    pub normalization: Option<Normalization>,
}

impl DetectorTrainConfig {
    pub fn new(seed: u64) -> Self {
        DetectorTrainConfig {
            profile: TrainingProfile::detection(),
            seed,
            crop_size: 128,
            box_side: BOX_SIDE,
            center_radius: 1.5,
            strides: vec![8],
            augmentation: AugmentationConfig::for_task(Task::Detection, seed),
            background_crops: 1,
            val_radius: DEFAULT_MATCH_RADIUS,
            val_score_thresh: 0.5,
            decoder: DecoderConfig::default(),
            normalization: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.decoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.crop_size < 16 {
            return Err(Error::Config(format!("crop_size must be at least 16, got {}", self.crop_size)));
        }
        if !(self.box_side > 0.0) || !(self.center_radius > 0.0) || !(self.val_radius > 0.0) {
            return Err(Error::Config("box_side, center_radius and val_radius must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.val_score_thresh) {
            return Err(Error::Config(format!("val_score_thresh must lie in [0, 1], got {}", self.val_score_thresh)));
        }
        Ok(())
    }

    pub fn settings(&self) -> DetectorSettings {
        DetectorSettings {
            strides: self.strides.clone(),
            center_radius: self.center_radius,
            box_side: self.box_side,
            decoder: self.decoder,
        }
    }
}

/// One training window: image index and top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Crop {
    image: usize,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
}

fn epoch_crops(train: &[ImageSample], cfg: &DetectorTrainConfig, rng: &mut ChaCha8Rng) -> Vec<Crop> {
    let mut crops = Vec::new();
    for (i, s) in train.iter().enumerate() {
        let (w, h) = s.pixels.dimensions();
        let (cw, ch) = (cfg.crop_size.min(w), cfg.crop_size.min(h));
        if cw == w && ch == h {
            crops.push(Crop { image: i, x0: 0, y0: 0, w, h });
            continue;
        }
        // Keep the annotated point at least a quarter crop from the border.
        let place = |p: f64, len: u32, side: u32, rng: &mut ChaCha8Rng| -> u32 {
            let margin = side as f64 / 4.0;
            let last = (len - side) as f64;
            let lo = (p - side as f64 + margin).clamp(0.0, last);
            let hi = (p - margin).clamp(lo, last);
            rng.random_range(lo..=hi).floor() as u32
        };
        for a in s.mitotic() {
            let x0 = place(a.x, w, cw, rng);
            let y0 = place(a.y, h, ch, rng);
            crops.push(Crop { image: i, x0, y0, w: cw, h: ch });
        }
        for _ in 0..cfg.background_crops {
            let x0 = rng.random_range(0..=w - cw);
            let y0 = rng.random_range(0..=h - ch);
            crops.push(Crop { image: i, x0, y0, w: cw, h: ch });
        }
    }
    crops.shuffle(rng);
    crops
}

/// Mitotic points that fall within reach of the crop, in crop coordinates.
fn crop_points(s: &ImageSample, c: &Crop, reach: f64) -> Vec<(f64, f64)> {
    s.mitotic()
        .map(|a| (a.x - c.x0 as f64, a.y - c.y0 as f64))
        .filter(|&(x, y)| x > -reach && y > -reach && x < c.w as f64 + reach && y < c.h as f64 + reach)
        .collect()
}

/// Detector F1 summed over images at a fixed score threshold.
pub fn detector_f1<T: Scalar>(model: &DetectorModel<T>, samples: &[ImageSample], score_thresh: f64, radius: f64) -> Result<f64> {
    let decoder = DecoderConfig { score_thresh, ..model.settings.decoder };
    let (mut tp, mut fp, mut fn_) = (0i64, 0i64, 0i64);
    for s in samples {
        let dets = model.detect(&s.pixels, &s.record.image_id, &decoder)?;
        let m = match_detections(&dets, &s.annotations, radius)?;
        tp += m.tp as i64;
        fp += m.fp as i64;
        fn_ += m.fn_ as i64;
    }
    f1_from_counts(tp, fp, fn_)
}

/// Train the reference detector on crops around annotated mitoses.
pub fn train_detector<T: Scalar>(
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorModel<T>, TrainingLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return invalid("training set is empty");
    }
    let normalization = cfg.normalization.unwrap_or_else(|| Normalization::from_images(train.iter().map(|s| &s.pixels)));
    let mut model = DetectorModel::<T>::reference(cfg.seed, normalization, cfg.settings())?;
    let mut log = TrainingLog::new("val_f1");
    let n_params = model.num_params();
    let mut opt = Optimizer::<T>::new(cfg.profile.optimizer, cfg.profile.momentum, n_params);
    let reach = cfg.box_side / 2.0;
    let mut stream_counter = 0u64;

    for epoch in 0..cfg.profile.epochs {
        let lr = cfg.profile.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let crops = epoch_crops(train, cfg, &mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, batch) in crops.chunks(cfg.profile.batch_size).enumerate() {
            let mut prepared = Vec::with_capacity(batch.len());
            for c in batch {
                let s = &train[c.image];
                let window = imageops::crop_imm(&s.pixels, c.x0, c.y0, c.w, c.h).to_image();
                let points = crop_points(s, c, reach);
                let (img, points) = augment_scene(&window, &points, &cfg.augmentation, stream_counter)?;
                stream_counter += 1;
                let boxes: Vec<BBox> = points
                    .iter()
                    .map(|&(x, y)| BBox { x_min: x - reach, y_min: y - reach, x_max: x + reach, y_max: y + reach })
                    .collect();
                let targets = encode_targets::<T>(img.dimensions(), &boxes, &cfg.strides, cfg.center_radius)?;
                prepared.push((model.tensor(&img), targets));
            }
            let positives: usize = prepared.iter().map(|(_, t)| t.num_positive()).sum();
            let normaliser = positives.max(1) as f64;
            let mut grads = vec![T::zero(); n_params];
            let mut parts = LossParts::default();
            for (x, targets) in &prepared {
                parts += model.accumulate(x, &targets.levels[0], normaliser, &mut grads)?;
            }
            let loss = parts.total();
            ensure_finite(loss, epoch, step)?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, step {step}")));
            }
            log.step_losses.push(loss);
            epoch_loss += loss;
            steps += 1;
            opt.step(&mut model.param_segments(), &grads, lr, cfg.profile.weight_decay);
        }
        let val_metric =
            if val.is_empty() { None } else { Some(detector_f1(&model, val, cfg.val_score_thresh, cfg.val_radius)?) };
        let loss = epoch_loss / steps.max(1) as f64;
        log::debug!("detector epoch {epoch}: loss {loss:.5} val_f1 {val_metric:?}");
        log.epochs.push(EpochRecord { epoch, loss, lr, val_metric });
    }
    Ok((model, log))
}
