use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mitosis_core::classifier::{predict_patches, train_classifier};
use mitosis_core::dataset::{kfold_assignments, PatchSample};
use mitosis_core::evaluation::{aggregate_folds, classification_report};
use serde::{Deserialize, Serialize};

use super::read_patches;
use crate::commands::train::classifier_config;
use crate::config::{config_error, data_error, write_atomic, write_json, RunManifest};
use crate::{CommonArgs, ProfileArgs, TaskArg};

#[derive(Debug, Clone, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub profile: ProfileArgs,
    /// Directory written by `prepare`; every patch in its index is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "refine")]
    pub task: TaskArg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k: usize,
    pub seed: u64,
    pub metric: String,
    pub folds: Vec<FoldRow>,
    pub aggregate: Aggregate,
}

impl CrossvalReport {
    /// `fold,num_train,num_val,balanced_accuracy,std` with a final
    /// `mean` row holding the aggregate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,num_train,num_val,balanced_accuracy,std\n");
        for f in &self.folds {
            s.push_str(&format!("{},{},{},{},\n", f.fold, f.num_train, f.num_val, f.balanced_accuracy));
        }
        s.push_str(&format!("mean,,,{},{}\n", self.aggregate.mean, self.aggregate.std));
        s
    }
}

/// Fold of every patch. Folds are dealt over source images so patches of
/// one image never straddle train and validation.
pub fn patch_folds(patches: &[PatchSample], k: usize, seed: u64) -> Result<Vec<usize>> {
    let sources: Vec<&str> =
        patches.iter().map(|p| p.source_image_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let by_source = kfold_assignments(sources.len(), k, seed)?;
    Ok(patches
        .iter()
        .map(|p| by_source[sources.binary_search(&p.source_image_id.as_str()).expect("source listed")])
        .collect())
}

fn check_classes(labels: impl Iterator<Item = u8>, fold: usize, part: &str) -> Result<()> {
    let seen: BTreeSet<u8> = labels.collect();
    if seen.len() < 2 {
        return Err(data_error(format!("fold {fold}: {part} patches contain a single class {seen:?}")));
    }
    Ok(())
}

/// Writes `crossval.json` and `crossval.csv`.
pub fn run(args: &CrossvalArgs) -> Result<()> {
    if args.k < 2 {
        return Err(config_error(format!("--k must be at least 2, got {}", args.k)));
    }
    let cfg = classifier_config(&args.common, &args.profile, args.task)?;
    let out = &args.common.out;
    let mut manifest = RunManifest::new("crossval", cfg.seed, &serde_json::json!({ "classifier": &cfg, "k": args.k }))?;
    let patches = read_patches(&args.data, &args.data.join("index.json"), &mut manifest)?;
    let folds = patch_folds(&patches, args.k, cfg.seed)?;
    let label = |p: &PatchSample| p.label.unwrap_or(0);
    for f in 0..args.k {
        check_classes(patches.iter().zip(&folds).filter(|(_, &g)| g == f).map(|(p, _)| label(p)), f, "validation")?;
        check_classes(patches.iter().zip(&folds).filter(|(_, &g)| g != f).map(|(p, _)| label(p)), f, "training")?;
    }

    let mut rows = Vec::new();
    for f in 0..args.k {
        let (val, train): (Vec<_>, Vec<_>) = patches.iter().zip(&folds).partition(|(_, &g)| g == f);
        let val: Vec<PatchSample> = val.into_iter().map(|(p, _)| p.clone()).collect();
        let train: Vec<PatchSample> = train.into_iter().map(|(p, _)| p.clone()).collect();
        log::info!("fold {f}: training on {} patches, validating on {}", train.len(), val.len());
        let (model, _) = train_classifier::<f32>(&train, &[], &cfg).with_context(|| format!("fold {f}"))?;
        let probs = predict_patches(&model, &val)?;
        let labels: Vec<u8> = val.iter().map(label).collect();
        let r = classification_report(&probs, &labels, cfg.threshold)?;
        let need = |v: Option<f64>, what: &str| v.ok_or_else(|| data_error(format!("fold {f}: {what} undefined")));
        rows.push(FoldRow {
            fold: f,
            num_train: train.len(),
            num_val: val.len(),
            balanced_accuracy: need(r.balanced_accuracy, "balanced accuracy")?,
            accuracy: need(r.accuracy, "accuracy")?,
            auc: need(r.auc, "AUC")?,
        });
    }
    let values: Vec<f64> = rows.iter().map(|r| r.balanced_accuracy).collect();
    let (mean, std) = aggregate_folds(&values)?;
    let report = CrossvalReport {
        k: args.k,
        seed: cfg.seed,
        metric: "balanced_accuracy".into(),
        folds: rows,
        aggregate: Aggregate { mean, std },
    };
    println!("balanced accuracy {mean:.4} ± {std:.4} over {} folds", args.k);
    write_atomic(&out.join("crossval.csv"), report.to_csv().as_bytes())?;
    write_json(&out.join("crossval.json"), &report)?;
    manifest.write(out)
}
