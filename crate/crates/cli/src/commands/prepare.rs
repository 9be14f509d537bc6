use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use mitosis_core::dataset::{
    extract_patch, split_dataset, write_annotations, PatchIndex, PatchIndexEntry, SplitSpec, Stratify, PATCH_SIDE,
};
use mitosis_core::{Category, PointAnnotation, Subtype};
use serde::{Deserialize, Serialize};

use super::read_annotations;
use crate::config::{config_error, data_error, resolve, write_json, RunManifest};
use crate::CommonArgs;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// 1 for mitotic figures, 0 for hard negatives.
    Mitotic,
    /// 1 for atypical, 0 for normal mitotic figures; others are skipped.
    Atypical,
}

impl LabelMode {
    pub fn label(self, a: &PointAnnotation) -> Option<u8> {
        match self {
            LabelMode::Mitotic => Some(u8::from(a.category == Category::Mitotic)),
            LabelMode::Atypical => match a.subtype {
                Some(Subtype::Atypical) => Some(1),
                Some(Subtype::Normal) => Some(0),
                None => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub seed: u64,
    /// Image-level train / val / test proportions.
    pub ratios: Vec<f64>,
    pub stratify_by: Stratify,
    pub labels: LabelMode,
    pub patch_side: u32,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            seed: 0,
            ratios: vec![0.7, 0.1, 0.2],
            stratify_by: Stratify::None,
            labels: LabelMode::Mitotic,
            patch_side: PATCH_SIDE,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Annotation JSON file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory that image file names resolve against (default: the
    /// annotation file's directory).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub labels: Option<LabelMode>,
    #[arg(long)]
    pub patch_side: Option<u32>,
}

pub fn effective_config(args: &PrepareArgs) -> Result<PrepareConfig> {
    let mut cfg = resolve(&PrepareConfig::default(), args.common.config.as_deref())?;
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(l) = args.labels {
        cfg.labels = l;
    }
    if let Some(p) = args.patch_side {
        cfg.patch_side = p;
    }
    if cfg.ratios.len() != SPLIT_NAMES.len() {
        return Err(config_error(format!("prepare needs three split ratios (train, val, test), got {:?}", cfg.ratios)));
    }
    if cfg.patch_side == 0 {
        return Err(config_error("patch side must be positive"));
    }
    Ok(cfg)
}

/// Write `patches/`, `index.json`, `splits/{train,val,test}.json` (patch
/// indices) and `splits/{name}_annotations.json` (image-level subsets).
pub fn run(args: &PrepareArgs) -> Result<()> {
    let cfg = effective_config(args)?;
    let spec = SplitSpec { ratios: cfg.ratios.clone(), seed: cfg.seed, stratify_by: cfg.stratify_by };
    spec.validate().map_err(|e| config_error(e.to_string()))?;
    let out = &args.common.out;
    let mut manifest = RunManifest::new("prepare", cfg.seed, &cfg)?;

    let set = read_annotations(&args.annotations, &mut manifest)?;
    if set.annotations.is_empty() {
        return Err(data_error(format!("no annotations in {}", args.annotations.display())));
    }
    let root = match &args.images {
        Some(r) => r.clone(),
        None => args.annotations.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let splits = split_dataset(&set, &spec)?;

    let patch_dir = out.join("patches");
    if patch_dir.exists() {
        fs::remove_dir_all(&patch_dir).with_context(|| format!("clearing {}", patch_dir.display()))?;
    }
    fs::create_dir_all(&patch_dir)?;
    let mut index = PatchIndex::default();
    for rec in &set.images {
        let path = root.join(&rec.path);
        let anns: Vec<&PointAnnotation> = set.annotations_for(&rec.image_id).collect();
        if anns.iter().all(|a| cfg.labels.label(a).is_none()) {
            continue;
        }
        manifest.add_input(&path)?;
        let pixels = image::open(&path).with_context(|| format!("decoding {}", path.display()))?.to_rgb8();
        for (k, a) in anns.into_iter().enumerate() {
            let Some(label) = cfg.labels.label(a) else { continue };
            let patch = extract_patch(&pixels, &rec.image_id, (a.x, a.y), cfg.patch_side, Some(label))?;
            let file = format!("patches/{}_{k:04}.png", rec.image_id);
            patch.pixels.save(out.join(&file)).with_context(|| format!("writing {file}"))?;
            index.patches.push(PatchIndexEntry { file, label, source_image_id: rec.image_id.clone(), x: a.x, y: a.y });
        }
    }
    if index.patches.is_empty() {
        return Err(data_error(format!("no annotations with a {:?} label", cfg.labels)));
    }
    write_json(&out.join("index.json"), &index)?;
    for (name, part) in SPLIT_NAMES.iter().zip(&splits) {
        let ids: HashSet<&str> = part.images.iter().map(|i| i.image_id.as_str()).collect();
        let sub = PatchIndex {
            patches: index.patches.iter().filter(|e| ids.contains(e.source_image_id.as_str())).cloned().collect(),
        };
        write_json(&out.join("splits").join(format!("{name}.json")), &sub)?;
        write_annotations(part, &out.join("splits").join(format!("{name}_annotations.json")))?;
    }
    let sources: BTreeSet<&str> = index.patches.iter().map(|e| e.source_image_id.as_str()).collect();
    log::info!("wrote {} patches from {} images to {}", index.patches.len(), sources.len(), out.display());
    manifest.write(out)
}
