use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use mitosis_core::classifier::{EnsembleSpec, PatchClassifier, PatchScorer};
use mitosis_core::checkpoint::MANIFEST_FILE;
use mitosis_core::dataset::parse_annotations;
use mitosis_core::pipeline::{detect_candidates, refine_candidates, PipelineConfig};
use mitosis_core::{Detection, Detector};
use serde::{Deserialize, Serialize};

use crate::config::{config_error, data_error, resolve, write_atomic, RunManifest};
use crate::CommonArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StageArg {
    DetectorOnly,
    TwoStage,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Image directory.
    #[arg(long)]
    pub images: PathBuf,
    /// Annotation file naming the images to process (default: every PNG or
    /// TIFF file in the directory, with the file stem as image id).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Detector checkpoint directory (or the `train-detector` output directory).
    #[arg(long)]
    pub detector: PathBuf,
    /// Classifier checkpoint directory, ensemble manifest, or the
    /// `train-classifier` output directory.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Detector score threshold.
    #[arg(long)]
    pub tau_d: Option<f64>,
    /// Classifier probability threshold.
    #[arg(long)]
    pub tau_c: Option<f64>,
    /// Cross-tile duplicate radius in pixels.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub tile_size: Option<u32>,
    #[arg(long)]
    pub overlap: Option<u32>,
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub seed: u64,
    pub stage: StageArg,
    pub pipeline: PipelineConfig,
}

pub fn effective_config(args: &InferArgs) -> Result<InferConfig> {
    let defaults = InferConfig { seed: 0, stage: StageArg::TwoStage, pipeline: PipelineConfig::default() };
    let mut cfg = resolve(&defaults, args.common.config.as_deref())?;
    let p = &mut cfg.pipeline;
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(v) = args.tau_d {
        p.detector_thresh = v;
    }
    if let Some(v) = args.tau_c {
        p.classifier_thresh = v;
    }
    if let Some(v) = args.radius {
        p.dedupe_radius = v;
    }
    if let Some(v) = args.tile_size {
        p.tile_size = v;
    }
    if let Some(v) = args.overlap {
        p.tile_overlap = v;
    }
    if let Some(s) = args.stage {
        cfg.stage = s;
    }
    cfg.pipeline.validate()?;
    Ok(cfg)
}

/// (image id, path) pairs in processing order.
fn list_images(args: &InferArgs, manifest: &mut RunManifest) -> Result<Vec<(String, PathBuf)>> {
    if let Some(ann) = &args.annotations {
        let set = parse_annotations(ann).with_context(|| format!("annotation file {}", ann.display()))?;
        manifest.add_input(ann)?;
        return Ok(set.images.into_iter().map(|r| (r.image_id, args.images.join(r.path))).collect());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(&args.images).with_context(|| format!("listing {}", args.images.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            found.push((id, path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(data_error(format!("no PNG or TIFF images in {}", args.images.display())));
    }
    Ok(found)
}

/// Accept a training output directory in place of the checkpoint inside it.
pub fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() && !path.join(MANIFEST_FILE).exists() {
        for inner in ["model", "ensemble.json"] {
            if path.join(inner).exists() {
                return path.join(inner);
            }
        }
    }
    path.to_path_buf()
}

pub fn load_scorer(path: &Path, manifest: &mut RunManifest) -> Result<Box<dyn PatchScorer>> {
    let path = &checkpoint_path(path);
    let ctx = || format!("classifier checkpoint {}", path.display());
    if path.is_file() {
        manifest.add_input(path)?;
        let spec = EnsembleSpec::from_manifest::<f32>(path).with_context(ctx)?;
        return Ok(Box::new(spec));
    }
    let (model, _) = PatchClassifier::<f32>::load(path).with_context(ctx)?;
    manifest.add_checkpoint(path)?;
    Ok(Box::new(model))
}

fn to_jsonl(dets: &[Detection]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for d in dets {
        out.extend(serde_json::to_vec(d)?);
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes `predictions.jsonl` with the final detections. In two-stage mode
/// the detector candidates also go to `candidates.jsonl`.
pub fn run(args: &InferArgs) -> Result<()> {
    let cfg = effective_config(args)?;
    let out = &args.common.out;
    let mut manifest = RunManifest::new("infer", cfg.seed, &cfg)?;
    let det_dir = checkpoint_path(&args.detector);
    let (detector, _) =
        Detector::load(&det_dir).with_context(|| format!("detector checkpoint {}", det_dir.display()))?;
    manifest.add_checkpoint(&det_dir)?;
    let scorer = match (cfg.stage, &args.classifier) {
        (StageArg::TwoStage, Some(p)) => Some(load_scorer(p, &mut manifest)?),
        (StageArg::TwoStage, None) => return Err(config_error("two-stage inference needs --classifier")),
        (StageArg::DetectorOnly, _) => None,
    };
    let images = list_images(args, &mut manifest)?;
    let (mut finals, mut candidates) = (Vec::new(), Vec::new());
    for (id, path) in &images {
        manifest.add_input(path)?;
        let pixels = image::open(path).with_context(|| format!("decoding {}", path.display()))?.to_rgb8();
        let cands = detect_candidates(&pixels, id, &detector, &cfg.pipeline)?;
        if let Some(s) = &scorer {
            finals.extend(refine_candidates(&pixels, &cands, |_, p| s.predict_proba(p), &cfg.pipeline)?);
        }
        log::debug!("{id}: {} candidates", cands.len());
        candidates.extend(cands);
    }
    if scorer.is_some() {
        write_atomic(&out.join("candidates.jsonl"), &to_jsonl(&candidates)?)?;
    } else {
        finals = candidates;
    }
    write_atomic(&out.join("predictions.jsonl"), &to_jsonl(&finals)?)?;
    log::info!("{} detections over {} images", finals.len(), images.len());
    manifest.write(out)
}
