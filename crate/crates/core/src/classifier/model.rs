use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::sigmoid_unchecked;
use crate::checkpoint::{self, CheckpointManifest, ModelKind};
use crate::dataset::INPUT_SIDE;
use crate::error::{invalid, Error, Result};
use crate::nn::{Backbone, ConvNet, LayerSpec, Normalization, Tensor};
use crate::scalar::{lit, Scalar};

/// Layers of the bundled reference classifier backbone. A 224 px input is
/// pooled to 56 px and reduced to a 7 x 7 x 32 feature map.
pub fn reference_classifier_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::AvgPool { factor: 4 },
        LayerSpec::conv3(3, 8, 2),
        LayerSpec::conv3(8, 16, 1),
        LayerSpec::conv3(16, 32, 2),
        LayerSpec::conv3(32, 32, 2),
    ]
}

/// Anything that maps a 224 x 224 RGB patch to a probability.
pub trait PatchScorer: Send + Sync {
    fn predict_proba(&self, patch: &RgbImage) -> Result<f64>;
}

fn check_patch_shape(patch: &RgbImage, side: u32) -> Result<()> {
    if patch.width() != side || patch.height() != side {
        return invalid(format!("classifier expects a {side}x{side} patch, got {}x{}", patch.width(), patch.height()));
    }
    Ok(())
}

/// Returns the same probability for every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScorer(pub f64);

impl PatchScorer for ConstantScorer {
    fn predict_proba(&self, patch: &RgbImage) -> Result<f64> {
        check_patch_shape(patch, INPUT_SIDE)?;
        Ok(self.0)
    }
}

/// Backbone, global average pooling and a single-logit linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassifier<T: Scalar, B: Backbone<T> = ConvNet<T>> {
    backbone: B,
    /// `C` weights followed by the bias.
    head: Vec<T>,
    pub normalization: Normalization,
}

/// Intermediate values of one training forward pass.
pub struct ClassifierCache<C, T> {
    backbone: C,
    pooled: Vec<T>,
    shape: (usize, usize, usize),
}

impl<T: Scalar, B: Backbone<T>> PatchClassifier<T, B> {
    /// Wrap a backbone with a freshly initialised head.
    pub fn with_backbone(backbone: B, seed: u64, normalization: Normalization) -> Self {
        let c = backbone.out_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
        let normal = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("positive std");
        let mut head: Vec<T> = (0..c).map(|_| lit(normal.sample(&mut rng))).collect();
        head.push(T::zero());
        PatchClassifier { backbone, head, normalization }
    }

    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn num_params(&self) -> usize {
        self.backbone.params().len() + self.head.len()
    }

    /// Backbone parameters followed by the head.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = self.backbone.params().to_vec();
        out.extend_from_slice(&self.head);
        out
    }

    pub(crate) fn param_segments(&mut self) -> [&mut [T]; 2] {
        [self.backbone.params_mut(), &mut self.head]
    }

    pub fn tensor(&self, patch: &RgbImage) -> Result<Tensor<T>> {
        check_patch_shape(patch, INPUT_SIDE)?;
        Ok(self.normalization.to_tensor(patch))
    }

    fn head_logit(&self, pooled: &[T]) -> T {
        let c = pooled.len();
        pooled.iter().zip(&self.head[..c]).map(|(&a, &w)| a * w).sum::<T>() + self.head[c]
    }

    fn pool(features: &Tensor<T>) -> Vec<T> {
        let n = lit::<T>((features.height * features.width) as f64);
        (0..features.channels).map(|c| features.plane(c).iter().copied().sum::<T>() / n).collect()
    }

    /// Raw logit for an already-normalised input tensor.
    pub fn logit(&self, x: &Tensor<T>) -> Result<T> {
        self.backbone.check_input(x)?;
        Ok(self.head_logit(&Self::pool(&self.backbone.forward(x))))
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (T, ClassifierCache<B::Cache, T>) {
        let (features, cache) = self.backbone.forward_train(x);
        let pooled = Self::pool(&features);
        let z = self.head_logit(&pooled);
        (z, ClassifierCache { backbone: cache, pooled, shape: features.shape() })
    }

    /// Accumulate `dL/dparams` for `dL/dz = grad_logit` into `grads`, laid
    /// out like [`Self::flat_params`].
    pub fn backward(&self, cache: &ClassifierCache<B::Cache, T>, grad_logit: T, grads: &mut [T]) {
        let nb = self.backbone.params().len();
        let (gb, gh) = grads.split_at_mut(nb);
        let c = cache.pooled.len();
        for i in 0..c {
            gh[i] += grad_logit * cache.pooled[i];
        }
        gh[c] += grad_logit;
        let (ch, h, w) = cache.shape;
        let inv = T::one() / lit::<T>((h * w) as f64);
        let mut g = Tensor::zeros(ch, h, w);
        for k in 0..ch {
            let v = grad_logit * self.head[k] * inv;
            g.plane_mut(k).iter_mut().for_each(|x| *x = v);
        }
        self.backbone.backward(&cache.backbone, &g, gb);
    }
}

impl<T: Scalar> PatchClassifier<T> {
    /// Reference backbone with He-initialised weights.
    pub fn reference(seed: u64, normalization: Normalization) -> Result<Self> {
        Ok(Self::with_backbone(ConvNet::new(reference_classifier_layers(), seed)?, seed, normalization))
    }

    /// All parameters zero: every input scores exactly 0.5.
    pub fn zeroed(layers: Vec<LayerSpec>) -> Result<Self> {
        let backbone = ConvNet::zeroed(layers)?;
        let head = vec![T::zero(); backbone.out_channels() + 1];
        Ok(PatchClassifier { backbone, head, normalization: Normalization::default() })
    }

    pub fn manifest(&self, seed: u64, config: serde_json::Value) -> CheckpointManifest {
        CheckpointManifest {
            kind: ModelKind::Classifier,
            dtype: T::DTYPE.to_string(),
            seed,
            backbone: self.backbone.layers().to_vec(),
            head: vec![LayerSpec::linear1x1(self.backbone.out_channels(), 1)],
            num_params: self.num_params(),
            params_sha256: String::new(),
            normalization: self.normalization,
            config,
            extra: serde_json::json!({ "input_side": INPUT_SIDE, "pooling": "global_average" }),
        }
    }

    pub fn save(&self, dir: &Path, seed: u64, config: serde_json::Value) -> Result<CheckpointManifest> {
        checkpoint::save(dir, &self.flat_params(), self.manifest(seed, config))
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let (params, manifest) = checkpoint::load::<T>(dir, ModelKind::Classifier)?;
        let mut model = Self::zeroed(manifest.backbone.clone())?;
        if manifest.head.len() != 1 || manifest.head[0] != LayerSpec::linear1x1(model.backbone.out_channels(), 1) {
            return Err(Error::Checkpoint("classifier head does not match its backbone".into()));
        }
        if params.len() != model.num_params() {
            return Err(Error::Checkpoint(format!(
                "architecture needs {} parameters, checkpoint holds {}",
                model.num_params(),
                params.len()
            )));
        }
        let nb = model.backbone.params().len();
        model.backbone.params_mut().copy_from_slice(&params[..nb]);
        model.head.copy_from_slice(&params[nb..]);
        model.normalization = manifest.normalization;
        Ok((model, manifest))
    }
}

impl<T: Scalar, B: Backbone<T>> PatchScorer for PatchClassifier<T, B> {
    fn predict_proba(&self, patch: &RgbImage) -> Result<f64> {
        let z = self.logit(&self.tensor(patch)?)?;
        let z = z.as_f64();
        if !z.is_finite() {
            return Err(Error::Numeric(format!("classifier produced logit {z}")));
        }
        Ok(sigmoid_unchecked(z))
    }
}

/// Probability for one 224 x 224 patch.
pub fn classify_patch(model: &dyn PatchScorer, patch: &RgbImage) -> Result<f64> {
    check_patch_shape(patch, INPUT_SIDE)?;
    model.predict_proba(patch)
}

/// Arithmetic mean of probabilities. Values are summed in sorted order so
/// the result does not depend on member order.
pub fn mean_probability(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return invalid("cannot average an empty probability list");
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(mean.clamp(sorted[0], sorted[sorted.len() - 1]))
}

/// Soft-voting ensemble: the mean of member probabilities.
pub struct EnsembleSpec {
    members: Vec<Box<dyn PatchScorer>>,
}

impl std::fmt::Debug for EnsembleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleSpec").field("members", &self.members.len()).finish()
    }
}

impl EnsembleSpec {
    pub fn new(members: Vec<Box<dyn PatchScorer>>) -> Result<Self> {
        if members.is_empty() {
            return invalid("ensemble needs at least one member");
        }
        Ok(EnsembleSpec { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Load every member listed in an ensemble manifest. Relative member
    /// paths resolve against the manifest's directory.
    pub fn from_manifest<T: Scalar>(path: &Path) -> Result<Self> {
        let manifest = EnsembleManifest::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut members: Vec<Box<dyn PatchScorer>> = Vec::new();
        for m in &manifest.members {
            let dir = if m.is_absolute() { m.clone() } else { base.join(m) };
            let (model, _) = PatchClassifier::<T>::load(&dir)?;
            members.push(Box::new(model));
        }
        Self::new(members)
    }
}

impl PatchScorer for EnsembleSpec {
    fn predict_proba(&self, patch: &RgbImage) -> Result<f64> {
        ensemble_predict(self, patch)
    }
}

pub fn ensemble_predict(spec: &EnsembleSpec, patch: &RgbImage) -> Result<f64> {
    let probs = spec.members.iter().map(|m| m.predict_proba(patch)).collect::<Result<Vec<_>>>()?;
    mean_probability(&probs)
}

pub const MEAN_PROB: &str = "mean_prob";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<PathBuf>,
    pub aggregation: String,
}

impl EnsembleManifest {
    pub fn new(members: Vec<PathBuf>) -> Self {
        EnsembleManifest { members, aggregation: MEAN_PROB.to_string() }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: EnsembleManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.aggregation != MEAN_PROB {
            return Err(Error::Config(format!("unsupported ensemble aggregation {:?}", m.aggregation)));
        }
        if m.members.is_empty() {
            return Err(Error::Config("ensemble manifest lists no members".into()));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn patch(v: u8) -> RgbImage {
        RgbImage::from_pixel(INPUT_SIDE, INPUT_SIDE, Rgb([v, v / 2, 255 - v]))
    }

    #[test]
    fn zero_model_scores_one_half() {
        let m = PatchClassifier::<f64>::zeroed(reference_classifier_layers()).unwrap();
        for v in [0, 90, 255] {
            assert_eq!(classify_patch(&m, &patch(v)).unwrap(), 0.5);
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let m = PatchClassifier::<f32>::reference(1, Normalization::default()).unwrap();
        assert!(classify_patch(&m, &RgbImage::new(50, 50)).is_err());
        assert!(ConstantScorer(0.3).predict_proba(&RgbImage::new(224, 10)).is_err());
    }

    #[test]
    fn prediction_is_deterministic() {
        let m = PatchClassifier::<f32>::reference(7, Normalization::default()).unwrap();
        let p = patch(120);
        assert_eq!(classify_patch(&m, &p).unwrap(), classify_patch(&m, &p).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let layers = vec![LayerSpec::AvgPool { factor: 8 }, LayerSpec::conv3(3, 4, 2), LayerSpec::conv3(4, 4, 2)];
        let mut m = PatchClassifier::with_backbone(ConvNet::<f64>::new(layers, 3).unwrap(), 3, Normalization::default());
        let img = RgbImage::from_fn(INPUT_SIDE, INPUT_SIDE, |x, y| Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, 128]));
        let x = m.tensor(&img).unwrap();
        let (_, cache) = m.forward_train(&x);
        let mut grads = vec![0.0; m.num_params()];
        m.backward(&cache, 1.0, &mut grads);
        let n = m.num_params();
        for &i in &[0usize, 5, 40, n - 3, n - 1] {
            let eps = 1e-6;
            let base = m.flat_params();
            let set = |m: &mut PatchClassifier<f64>, v: &[f64]| {
                let nb = m.backbone.params().len();
                m.backbone.params_mut().copy_from_slice(&v[..nb]);
                m.head.copy_from_slice(&v[nb..]);
            };
            let mut p = base.clone();
            p[i] += eps;
            set(&mut m, &p);
            let up = m.logit(&x).unwrap();
            p[i] -= 2.0 * eps;
            set(&mut m, &p);
            let down = m.logit(&x).unwrap();
            set(&mut m, &base);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grads[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {i}: fd {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = PatchClassifier::<f32>::reference(11, Normalization { mean: [0.4; 3], std: [0.2; 3] }).unwrap();
        m.save(dir.path(), 11, serde_json::json!({})).unwrap();
        let (back, manifest) = PatchClassifier::<f32>::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest.kind, ModelKind::Classifier);
        assert!(PatchClassifier::<f64>::load(dir.path()).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let p = patch(10);
        let e = EnsembleSpec::new(vec![Box::new(ConstantScorer(0.2)), Box::new(ConstantScorer(0.8))]).unwrap();
        assert!((ensemble_predict(&e, &p).unwrap() - 0.5).abs() < 1e-15);
        let e = EnsembleSpec::new(vec![
            Box::new(ConstantScorer(0.1)),
            Box::new(ConstantScorer(0.2)),
            Box::new(ConstantScorer(0.9)),
        ])
        .unwrap();
        assert!((ensemble_predict(&e, &p).unwrap() - 0.4).abs() < 1e-15);
        let m = PatchClassifier::<f32>::reference(2, Normalization::default()).unwrap();
        let direct = classify_patch(&m, &p).unwrap();
        let single = EnsembleSpec::new(vec![Box::new(m)]).unwrap();
        assert_eq!(ensemble_predict(&single, &p).unwrap(), direct);
        assert!(EnsembleSpec::new(vec![]).is_err());
    }

    #[test]
    fn ensemble_manifest_loads_members() {
        let dir = tempfile::tempdir().unwrap();
        for s in [1u64, 2] {
            let m = PatchClassifier::<f32>::reference(s, Normalization::default()).unwrap();
            m.save(&dir.path().join(format!("m{s}")), s, serde_json::json!({})).unwrap();
        }
        let path = dir.path().join("ensemble.json");
        EnsembleManifest::new(vec!["m1".into(), "m2".into()]).write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"aggregation\": \"mean_prob\""));
        let e = EnsembleSpec::from_manifest::<f32>(&path).unwrap();
        assert_eq!(e.len(), 2);
        let p = patch(77);
        let a = PatchClassifier::<f32>::reference(1, Normalization::default()).unwrap().predict_proba(&p).unwrap();
        let b = PatchClassifier::<f32>::reference(2, Normalization::default()).unwrap().predict_proba(&p).unwrap();
        assert!((ensemble_predict(&e, &p).unwrap() - (a + b) / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mean_is_permutation_invariant_and_bounded(probs in prop::collection::vec(0.0f64..=1.0, 1..12), rot in 0usize..12) {
            let m = mean_probability(&probs).unwrap();
            let mut rotated = probs.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            rotated.reverse();
            prop_assert_eq!(m, mean_probability(&rotated).unwrap());
            let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= m && m <= hi);
        }
    }
}
