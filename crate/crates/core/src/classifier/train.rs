use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{bce_term, bce_with_logits_grad_weighted, LogitBatch};
use super::model::{PatchClassifier, PatchScorer};
use crate::dataset::{
    augment, resize_to_input, AugmentationConfig, BackboneProfile, PatchSample, Task, TrainingProfile, INPUT_SIDE,
};
use crate::error::{invalid, Error, Result};
use crate::evaluation::balanced_accuracy;
use crate::nn::{Normalization, Optimizer};
use crate::scalar::{lit, Scalar};
use crate::training::{ensure_finite, EpochRecord, TrainingLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub task: Task,
    pub profile: TrainingProfile,
    pub backbone: BackboneProfile,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    /// Weight on the positive-class loss term; `None` leaves classes unweighted.
    pub pos_weight: Option<f64>,
    /// Fixed input statistics; `None` computes them from the training patches.
    pub normalization: Option<Normalization>,
    /// Decision threshold for the validation balanced accuracy.
    pub threshold: f64,
}

impl ClassifierTrainConfig {
    /// Defaults for a task: `RefineCls` or `AtypicalCls`.
    pub fn for_task(task: Task, seed: u64) -> Result<Self> {
        let profile = match task {
            Task::RefineCls => TrainingProfile::refine_cls(),
            Task::AtypicalCls => TrainingProfile::atypical_cls(),
            Task::Detection => return Err(Error::Config("detection is not a classifier task".into())),
        };
        Ok(ClassifierTrainConfig {
            task,
            profile,
            backbone: BackboneProfile::Reference,
            seed,
            augmentation: AugmentationConfig::for_task(task, seed),
            pos_weight: None,
            normalization: None,
            threshold: 0.5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.backbone.ensure_bundled()?;
        if let Some(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("pos_weight must be positive, got {w}")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

fn label_of(p: &PatchSample, i: usize) -> Result<u8> {
    match p.label {
        Some(l @ (0 | 1)) => Ok(l),
        Some(l) => invalid(format!("patch {i} has label {l}, expected 0 or 1")),
        None => invalid(format!("patch {i} is unlabeled")),
    }
}

/// Bring a patch to the classifier input size (no-op when it already is).
pub fn to_input(pixels: &RgbImage) -> Result<RgbImage> {
    if pixels.width() == INPUT_SIDE && pixels.height() == INPUT_SIDE {
        Ok(pixels.clone())
    } else {
        resize_to_input(pixels, INPUT_SIDE)
    }
}

/// Probability for each patch, resizing to the input size first.
pub fn predict_patches(scorer: &dyn PatchScorer, patches: &[PatchSample]) -> Result<Vec<f64>> {
    patches.iter().map(|p| scorer.predict_proba(&to_input(&p.pixels)?)).collect()
}

/// Balanced accuracy on labelled patches, or `None` when either class is missing.
pub fn validation_balanced_accuracy(scorer: &dyn PatchScorer, patches: &[PatchSample], threshold: f64) -> Result<Option<f64>> {
    let labels = patches.iter().enumerate().map(|(i, p)| label_of(p, i)).collect::<Result<Vec<_>>>()?;
    if !labels.contains(&0) || !labels.contains(&1) {
        return Ok(None);
    }
    let preds: Vec<u8> = predict_patches(scorer, patches)?.iter().map(|&p| u8::from(p >= threshold)).collect();
    balanced_accuracy(&preds, &labels).map(Some)
}

/// Train the reference classifier on labelled patches.
pub fn train_classifier<T: Scalar>(
    train: &[PatchSample],
    val: &[PatchSample],
    cfg: &ClassifierTrainConfig,
) -> Result<(PatchClassifier<T>, TrainingLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return invalid("training set is empty");
    }
    let labels = train.iter().enumerate().map(|(i, p)| label_of(p, i)).collect::<Result<Vec<_>>>()?;
    if !labels.contains(&0) || !labels.contains(&1) {
        return invalid("training set contains a single class; the loss is degenerate");
    }
    let normalization = cfg.normalization.unwrap_or_else(|| Normalization::from_images(train.iter().map(|p| &p.pixels)));
    let mut model = PatchClassifier::<T>::reference(cfg.seed, normalization)?;
    let mut log = TrainingLog::new("val_balanced_accuracy");
    let n_params = model.num_params();
    let mut opt = Optimizer::<T>::new(cfg.profile.optimizer, cfg.profile.momentum, n_params);
    let pos_weight = lit::<T>(cfg.pos_weight.unwrap_or(1.0));
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.profile.epochs {
        let lr = cfg.profile.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.profile.batch_size).enumerate() {
            let mut caches = Vec::with_capacity(batch.len());
            let mut z = Vec::with_capacity(batch.len());
            for &i in batch {
                let stream = (epoch * train.len() + i) as u64;
                let sample = augment(&train[i], &cfg.augmentation, stream)?;
                let x = model.tensor(&to_input(&sample.pixels)?)?;
                let (logit, cache) = model.forward_train(&x);
                if !logit.is_finite() {
                    return Err(Error::Numeric(format!("logit became {logit:?} at epoch {epoch}, step {step}")));
                }
                z.push(logit);
                caches.push(cache);
            }
            let batch_labels: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let lb = LogitBatch::from_labels(z, &batch_labels)?;
            let loss = lb
                .logits()
                .iter()
                .zip(lb.labels())
                .map(|(&z, &y)| bce_term(z, y, pos_weight).as_f64())
                .sum::<f64>();
            ensure_finite(loss, epoch, step)?;
            log.step_losses.push(loss / batch.len() as f64);
            loss_sum += loss;
            let dz = bce_with_logits_grad_weighted(&lb, pos_weight);
            let mut grads = vec![T::zero(); n_params];
            for (cache, &g) in caches.iter().zip(&dz) {
                model.backward(cache, g, &mut grads);
            }
            opt.step(&mut model.param_segments(), &grads, lr, cfg.profile.weight_decay);
        }
        let val_metric = validation_balanced_accuracy(&model, val, cfg.threshold)?;
        let loss = loss_sum / train.len() as f64;
        log::debug!("classifier epoch {epoch}: loss {loss:.5} lr {lr:.3e} val {val_metric:?}");
        log.epochs.push(EpochRecord { epoch, loss, lr, val_metric });
    }
    Ok((model, log))
}
