use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mitosis_core::evaluation::{detection_metrics, DetectionMetrics, PrPoint, ThresholdMode, DEFAULT_MATCH_RADIUS};
use mitosis_core::{Detection, Error as CoreError, Stage};
use serde::{Deserialize, Serialize};

use super::read_annotations;
use crate::config::{config_error, data_error, resolve, write_atomic, write_json, RunManifest};
use crate::CommonArgs;

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON-lines prediction file; repeat to combine several.
    #[arg(long, required = true)]
    pub predictions: Vec<PathBuf>,
    /// Ground-truth annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// `fixed:<v>` or `best-f1`.
    #[arg(long)]
    pub threshold: Option<String>,
    /// Matching radius in pixels.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Score the detector and pipeline stages side by side.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub seed: u64,
    pub threshold: ThresholdMode,
    pub radius: f64,
    pub compare: bool,
}

pub fn effective_config(args: &EvaluateArgs) -> Result<EvaluateConfig> {
    let defaults =
        EvaluateConfig { seed: 0, threshold: ThresholdMode::Fixed(0.5), radius: DEFAULT_MATCH_RADIUS, compare: false };
    let mut cfg = resolve(&defaults, args.common.config.as_deref())?;
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(t) = &args.threshold {
        cfg.threshold = t.parse()?;
    }
    if let Some(r) = args.radius {
        cfg.radius = r;
    }
    cfg.compare |= args.compare;
    if !(cfg.radius > 0.0 && cfg.radius.is_finite()) {
        return Err(config_error(format!("matching radius must be positive, got {}", cfg.radius)));
    }
    Ok(cfg)
}

/// Parse a JSON-lines prediction file; blank lines are skipped.
pub fn read_predictions(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(line).map_err(|e| {
            anyhow::Error::new(CoreError::Parse { index: i + 1, message: e.to_string() })
                .context(format!("prediction file {} line {}", path.display(), i + 1))
        })?;
        dets.push(d);
    }
    Ok(dets)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: Option<Stage>,
    pub num_predictions: usize,
    pub metrics: DetectionMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub threshold_mode: ThresholdMode,
    pub radius: f64,
    pub num_images: usize,
    pub num_ground_truth: usize,
    pub stages: Vec<StageReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_gain: Option<f64>,
}

fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("recall,precision\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.recall, p.precision));
    }
    s
}

/// Comparison table with one row per stage.
pub fn compare_table(stages: &[StageReport]) -> String {
    let mut s = String::from("stage,f1,ap,precision,recall,tp,fp,fn\n");
    for r in stages {
        let m = &r.metrics;
        let name = match r.stage {
            Some(Stage::Detector) => "detector",
            Some(Stage::Pipeline) => "pipeline",
            None => "all",
        };
        s.push_str(&format!(
            "{name},{:.4},{:.4},{:.4},{:.4},{},{},{}\n",
            m.f1, m.ap, m.precision, m.recall, m.tp, m.fp, m.fn_
        ));
    }
    s
}

/// Writes `report.json` and `pr_curve.csv` (one `pr_curve_<stage>.csv` per
/// stage with `--compare`, plus `compare.csv`). Nothing is written unless
/// every metric could be computed.
pub fn run(args: &EvaluateArgs) -> Result<()> {
    let cfg = effective_config(args)?;
    let out = &args.common.out;
    let mut manifest = RunManifest::new("evaluate", cfg.seed, &cfg)?;
    let gt = read_annotations(&args.annotations, &mut manifest)?;
    let mut dets = Vec::new();
    for p in &args.predictions {
        dets.extend(read_predictions(p)?);
        manifest.add_input(p)?;
    }
    let known: HashSet<&str> = gt.images.iter().map(|i| i.image_id.as_str()).collect();
    let unknown: BTreeSet<&str> = dets.iter().map(|d| d.image_id.as_str()).filter(|id| !known.contains(id)).collect();
    if !unknown.is_empty() {
        let list: Vec<&str> = unknown.into_iter().collect();
        return Err(data_error(format!("predictions reference images absent from the ground truth: {}", list.join(", "))));
    }

    let groups: Vec<(Option<Stage>, Vec<Detection>)> = if cfg.compare {
        [Stage::Detector, Stage::Pipeline]
            .into_iter()
            .map(|s| (Some(s), dets.iter().filter(|d| d.stage == s).cloned().collect()))
            .collect()
    } else {
        vec![(None, dets)]
    };
    let mut stages = Vec::new();
    let mut curves = Vec::new();
    for (stage, group) in &groups {
        let (metrics, points) = detection_metrics(group, &gt.annotations, cfg.radius, cfg.threshold)?;
        stages.push(StageReport { stage: *stage, num_predictions: group.len(), metrics });
        curves.push(pr_csv(&points));
    }
    let f1_gain = cfg.compare.then(|| stages[1].metrics.f1 - stages[0].metrics.f1);
    let report = Report {
        threshold_mode: cfg.threshold,
        radius: cfg.radius,
        num_images: gt.images.len(),
        num_ground_truth: gt.annotations.iter().filter(|a| a.is_mitotic()).count(),
        stages,
        f1_gain,
    };

    if cfg.compare {
        let table = compare_table(&report.stages);
        print!("{table}");
        write_atomic(&out.join("compare.csv"), table.as_bytes())?;
        for (name, curve) in ["detector", "pipeline"].iter().zip(&curves) {
            write_atomic(&out.join(format!("pr_curve_{name}.csv")), curve.as_bytes())?;
        }
    } else {
        let m = &report.stages[0].metrics;
        println!("f1 {:.4} ap {:.4} precision {:.4} recall {:.4} ({})", m.f1, m.ap, m.precision, m.recall, cfg.threshold);
        write_atomic(&out.join("pr_curve.csv"), curves[0].as_bytes())?;
    }
    write_json(&out.join("report.json"), &report)?;
    manifest.write(out)
}
