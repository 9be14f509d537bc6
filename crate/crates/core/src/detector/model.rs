use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::loss::{head_loss, head_to_predictions, LossParts, HEAD_CHANNELS};
use super::targets::{decode_detections, nms, DecoderConfig, LevelTargets, PredictionMaps};
use crate::checkpoint::{self, CheckpointManifest, ModelKind};
use crate::error::{invalid, Error, Result};
use crate::nn::{Backbone, ConvCache, ConvNet, LayerSpec, Normalization, Tensor};
use crate::scalar::{lit, Scalar};
use crate::types::Detection;

/// Positive-class prior used to initialise the class bias.
const CLS_PRIOR: f64 = 0.01;

/// Bundled four-layer reference backbone with total stride 8.
pub fn reference_detector_layers() -> Vec<LayerSpec> {
    vec![LayerSpec::conv3(3, 8, 2), LayerSpec::conv3(8, 16, 2), LayerSpec::conv3(16, 32, 2), LayerSpec::conv3(32, 32, 1)]
}

/// Settings stored with a detector checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub strides: Vec<usize>,
    pub center_radius: f64,
    pub box_side: f64,
    pub decoder: DecoderConfig,
}

/// Produces candidate detections for one image tile.
pub trait Proposer: Send + Sync {
    fn propose(&self, tile: &RgbImage, image_id: &str, decoder: &DecoderConfig) -> Result<Vec<Detection>>;
}

/// Backbone plus a 1x1 convolution emitting `[cls, l, t, r, b, centerness]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<T: Scalar, B: Backbone<T> = ConvNet<T>> {
    backbone: B,
    head: ConvNet<T>,
    pub normalization: Normalization,
    pub settings: DetectorSettings,
}

pub struct DetectorCache<C, T> {
    backbone: C,
    head: ConvCache<T>,
    features: (usize, usize, usize),
}

impl<T: Scalar, B: Backbone<T>> DetectorModel<T, B> {
    pub fn with_backbone(backbone: B, seed: u64, normalization: Normalization, settings: DetectorSettings) -> Result<Self> {
        if settings.strides != [backbone.stride()] {
            return invalid(format!(
                "detector has one output level at stride {}, settings list {:?}",
                backbone.stride(),
                settings.strides
            ));
        }
        let c = backbone.out_channels();
        let mut head = ConvNet::new(vec![LayerSpec::linear1x1(c, HEAD_CHANNELS)], seed ^ 0xde7e_c7)?;
        // Small head weights keep early box predictions near the bias.
        for p in head.params_mut()[..c * HEAD_CHANNELS].iter_mut() {
            *p *= lit::<T>(0.1);
        }
        head.set_bias(0, 0, lit(-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln()));
        let box_bias = lit::<T>((settings.box_side / 2.0 / backbone.stride() as f64).ln());
        for ch in 1..5 {
            head.set_bias(0, ch, box_bias);
        }
        Ok(DetectorModel { backbone, head, normalization, settings })
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn num_params(&self) -> usize {
        self.backbone.params().len() + self.head.num_params()
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = self.backbone.params().to_vec();
        out.extend_from_slice(self.head.params());
        out
    }

    pub(crate) fn param_segments(&mut self) -> [&mut [T]; 2] {
        [self.backbone.params_mut(), self.head.params_mut()]
    }

    pub fn tensor(&self, image: &RgbImage) -> Tensor<T> {
        self.normalization.to_tensor(image)
    }

    /// Raw head output for an input tensor.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone.check_input(x)?;
        Ok(self.head.forward(&self.backbone.forward(x)))
    }

    pub fn predict(&self, image: &RgbImage) -> Result<PredictionMaps<T>> {
        let out = self.forward(&self.tensor(image))?;
        Ok(PredictionMaps { levels: vec![head_to_predictions(&out, self.stride())] })
    }

    /// Decoded, NMS-filtered detections, at most `decoder.max_detections`.
    pub fn detect(&self, image: &RgbImage, image_id: &str, decoder: &DecoderConfig) -> Result<Vec<Detection>> {
        decoder.validate()?;
        let maps = self.predict(image)?;
        if maps.levels.iter().any(|l| l.cls_logit.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("detector produced non-finite scores on {image_id}")));
        }
        let candidates = decode_detections(&maps, image_id, decoder.score_thresh, decoder.pre_nms_topk)?;
        let mut kept = nms(&candidates, decoder.nms_iou);
        kept.truncate(decoder.max_detections);
        Ok(kept)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, DetectorCache<B::Cache, T>) {
        let (features, backbone) = self.backbone.forward_train(x);
        let shape = features.shape();
        let (out, head) = self.head.forward_train(&features);
        (out, DetectorCache { backbone, head, features: shape })
    }

    /// Loss for one sample; parameter gradients accumulate into `grads`.
    pub fn accumulate(&self, x: &Tensor<T>, targets: &LevelTargets<T>, normaliser: f64, grads: &mut [T]) -> Result<LossParts> {
        self.backbone.check_input(x)?;
        let (out, cache) = self.forward_train(x);
        if (out.height, out.width) != (targets.height, targets.width) {
            return invalid(format!(
                "head grid {}x{} does not match target grid {}x{}",
                out.height, out.width, targets.height, targets.width
            ));
        }
        let mut g = Tensor::zeros(out.channels, out.height, out.width);
        let parts = head_loss(&out, targets, normaliser, &mut g);
        let nb = self.backbone.params().len();
        let (gb, gh) = grads.split_at_mut(nb);
        let gf = self.head.backward(&cache.head, &g, gh, true).expect("input gradient requested");
        debug_assert_eq!(gf.shape(), cache.features);
        self.backbone.backward(&cache.backbone, &gf, gb);
        Ok(parts)
    }
}

impl<T: Scalar> DetectorModel<T> {
    pub fn reference(seed: u64, normalization: Normalization, settings: DetectorSettings) -> Result<Self> {
        Self::with_backbone(ConvNet::new(reference_detector_layers(), seed)?, seed, normalization, settings)
    }

    pub fn manifest(&self, seed: u64, config: serde_json::Value) -> Result<CheckpointManifest> {
        Ok(CheckpointManifest {
            kind: ModelKind::Detector,
            dtype: T::DTYPE.to_string(),
            seed,
            backbone: self.backbone.layers().to_vec(),
            head: self.head.layers().to_vec(),
            num_params: self.num_params(),
            params_sha256: String::new(),
            normalization: self.normalization,
            config,
            extra: serde_json::to_value(&self.settings)?,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64, config: serde_json::Value) -> Result<CheckpointManifest> {
        checkpoint::save(dir, &self.flat_params(), self.manifest(seed, config)?)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let (params, manifest) = checkpoint::load::<T>(dir, ModelKind::Detector)?;
        let settings: DetectorSettings = serde_json::from_value(manifest.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("detector settings in manifest: {e}")))?;
        let backbone = ConvNet::zeroed(manifest.backbone.clone())?;
        let head = ConvNet::zeroed(manifest.head.clone())?;
        if head.out_channels() != HEAD_CHANNELS || head.in_channels() != Some(backbone.out_channels()) {
            return Err(Error::Checkpoint("detector head does not match its backbone".into()));
        }
        if settings.strides != [backbone.stride()] {
            return Err(Error::Checkpoint(format!(
                "manifest strides {:?} do not match backbone stride {}",
                settings.strides,
                backbone.stride()
            )));
        }
        let mut model = DetectorModel { backbone, head, normalization: manifest.normalization, settings };
        if params.len() != model.num_params() {
            return Err(Error::Checkpoint(format!(
                "architecture needs {} parameters, checkpoint holds {}",
                model.num_params(),
                params.len()
            )));
        }
        let nb = model.backbone.params().len();
        model.backbone.params_mut().copy_from_slice(&params[..nb]);
        model.head.params_mut().copy_from_slice(&params[nb..]);
        Ok((model, manifest))
    }
}

impl<T: Scalar, B: Backbone<T>> Proposer for DetectorModel<T, B> {
    fn propose(&self, tile: &RgbImage, image_id: &str, decoder: &DecoderConfig) -> Result<Vec<Detection>> {
        self.detect(tile, image_id, decoder)
    }
}
