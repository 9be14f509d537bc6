use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mitosis_core::classifier::{train_classifier, ClassifierTrainConfig, EnsembleManifest};
use mitosis_core::dataset::{AugmentationConfig, Task};
use mitosis_core::detector::{train_detector, DetectorTrainConfig};
use mitosis_core::training::TrainingLog;

use super::{read_annotations, read_patches};
use crate::config::{config_error, resolve, write_atomic, RunManifest};
use crate::{CommonArgs, ProfileArgs, TaskArg};

#[derive(Debug, Clone, Args)]
pub struct TrainDetectorArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub profile: ProfileArgs,
    /// Training annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Optional validation annotation file for the per-epoch F1.
    #[arg(long)]
    pub val_annotations: Option<PathBuf>,
    /// Directory that image file names resolve against (default: the
    /// annotation file's directory).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub crop_size: Option<u32>,
}

pub fn detector_config(args: &TrainDetectorArgs) -> Result<DetectorTrainConfig> {
    let mut cfg = resolve(&DetectorTrainConfig::new(0), args.common.config.as_deref())?;
    if let Some(s) = args.common.seed {
        cfg.seed = s;
        cfg.augmentation.seed = s;
    }
    args.profile.apply(&mut cfg.profile);
    if args.profile.no_augment {
        cfg.augmentation = AugmentationConfig::none(Task::Detection);
    }
    if let Some(c) = args.crop_size {
        cfg.crop_size = c;
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(cfg)
}

fn image_root(images: &Option<PathBuf>, annotations: &Path) -> PathBuf {
    images.clone().unwrap_or_else(|| annotations.parent().unwrap_or(Path::new(".")).to_path_buf())
}

fn write_log(path: &Path, log: &TrainingLog) -> Result<()> {
    write_atomic(path, log.to_csv().as_bytes())
}

/// Writes `model/` (checkpoint), `training_log.csv` and `run_manifest.json`.
pub fn run_detector(args: &TrainDetectorArgs) -> Result<()> {
    let cfg = detector_config(args)?;
    let out = &args.common.out;
    let mut manifest = RunManifest::new("train-detector", cfg.seed, &cfg)?;
    let root = image_root(&args.images, &args.annotations);
    let train_set = read_annotations(&args.annotations, &mut manifest)?;
    let train = train_set.load_images(&root).context("loading training images")?;
    let val = match &args.val_annotations {
        Some(p) => read_annotations(p, &mut manifest)?.load_images(&root).context("loading validation images")?,
        None => Vec::new(),
    };
    for s in train.iter().chain(&val) {
        manifest.add_input(&root.join(&s.record.path))?;
    }
    log::info!("training detector on {} images for {} epochs", train.len(), cfg.profile.epochs);
    let (model, log) = train_detector::<f32>(&train, &val, &cfg)?;
    model.save(&out.join("model"), cfg.seed, serde_json::to_value(&cfg)?)?;
    write_log(&out.join("training_log.csv"), &log)?;
    manifest.write(out)
}

#[derive(Debug, Clone, Args)]
pub struct TrainClassifierArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub profile: ProfileArgs,
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "refine")]
    pub task: TaskArg,
    /// Ensemble size; members get consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub members: usize,
}

pub fn classifier_config(common: &CommonArgs, profile: &ProfileArgs, task: TaskArg) -> Result<ClassifierTrainConfig> {
    let task = Task::from(task);
    let mut cfg = resolve(&ClassifierTrainConfig::for_task(task, 0)?, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.augmentation.seed = s;
    }
    profile.apply(&mut cfg.profile);
    if profile.no_augment {
        cfg.augmentation = AugmentationConfig::none(task);
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(cfg)
}

/// One member: `model/` plus `training_log.csv`. Several: `member_<i>/`
/// and `member_<i>_training_log.csv`, tied together by `ensemble.json`.
pub fn run_classifier(args: &TrainClassifierArgs) -> Result<()> {
    if args.members == 0 {
        return Err(config_error("--members must be at least 1"));
    }
    let cfg = classifier_config(&args.common, &args.profile, args.task)?;
    let out = &args.common.out;
    let mut manifest = RunManifest::new("train-classifier", cfg.seed, &serde_json::json!({
        "classifier": &cfg,
        "members": args.members,
    }))?;
    let train = read_patches(&args.data, &args.data.join("splits/train.json"), &mut manifest)?;
    let val = read_patches(&args.data, &args.data.join("splits/val.json"), &mut manifest)?;
    let mut dirs = Vec::new();
    for m in 0..args.members {
        let mut member_cfg = cfg.clone();
        member_cfg.seed = cfg.seed + m as u64;
        member_cfg.augmentation.seed = cfg.augmentation.seed + m as u64;
        log::info!("training classifier member {m} on {} patches for {} epochs", train.len(), cfg.profile.epochs);
        let (model, log) = train_classifier::<f32>(&train, &val, &member_cfg)?;
        let (dir, log_file) = if args.members == 1 {
            ("model".to_string(), "training_log.csv".to_string())
        } else {
            (format!("member_{m}"), format!("member_{m}_training_log.csv"))
        };
        model.save(&out.join(&dir), member_cfg.seed, serde_json::to_value(&member_cfg)?)?;
        write_log(&out.join(log_file), &log)?;
        if let Some(v) = log.epochs.last().and_then(|e| e.val_metric) {
            log::info!("member {m}: final validation balanced accuracy {v:.4}");
        }
        dirs.push(PathBuf::from(dir));
    }
    if args.members > 1 {
        EnsembleManifest::new(dirs).write(&out.join("ensemble.json"))?;
    }
    manifest.write(out)
}
