//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{cli, s, synth};
use image::{Rgb, RgbImage};
use mitosis_cli::commands::crossval::CrossvalReport;
use mitosis_core::classifier::{
    bce_with_logits, bce_with_logits_grad, ensemble_predict, train_classifier, ClassifierTrainConfig, ConstantScorer,
    EnsembleSpec, PatchScorer,
};
use mitosis_core::dataset::{
    cosine_lr, extract_patch, kfold_split, split_dataset, AnnotationSet, ImageSample, OptimizerKind, SplitSpec,
    Stratify, Task, TrainingProfile, INPUT_SIDE,
};
use mitosis_core::detector::{
    centerness, decode_detections, encode_targets, nms, train_detector, DecoderConfig, DetectorTrainConfig, Proposer,
};
use mitosis_core::evaluation::{aggregate_folds, average_precision, match_detections, roc_auc};
use mitosis_core::pipeline::{detect_candidates, filter_pipeline_f1_gain, refine_candidates, PipelineConfig};
use mitosis_core::synthetic::{generate, SyntheticConfig};
use mitosis_core::{iou, BBox, Category, Detection, ImageRecord, PointAnnotation, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {t:.1?}, limit {limit:?}"));
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// 1. loss correctness

/// `-(1/N) sum [y ln s + (1-y) ln(1-s)]` with `1 - s` formed as a quotient.
fn naive_bce(z: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&z, &y) in z.iter().zip(y) {
        let e = (-z).exp();
        let s = 1.0 / (1.0 + e);
        let one_minus_s = e / (1.0 + e);
        total -= y * s.ln() + (1.0 - y) * one_minus_s.ln();
    }
    total / z.len() as f64
}

fn batch(z: Vec<f64>, y: Vec<f64>) -> mitosis_core::classifier::LogitBatch<f64> {
    mitosis_core::classifier::LogitBatch::new(z, y).expect("valid batch")
}

fn loss_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_value, mut worst_grad) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let n = rng.random_range(1..=32);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..=20.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let b = batch(z.clone(), y.clone());
        worst_value = worst_value.max((bce_with_logits(&b) - naive_bce(&z, &y)).abs());
        let grad = bce_with_logits_grad(&b);
        for i in 0..n {
            // the mean is linear, so each coordinate is checked on its own term
            let h = 1e-5;
            let term = |v: f64| bce_with_logits(&batch(vec![v], vec![y[i]]));
            let fd = (term(z[i] + h) - term(z[i] - h)) / (2.0 * h);
            let analytic = grad[i] * n as f64;
            worst_grad = worst_grad.max((fd - analytic).abs() / analytic.abs());
        }
    }
    ensure!(worst_value <= 1e-9, "loss differs from the naive form by {worst_value:e}");
    ensure!(worst_grad <= 1e-5, "gradient relative error {worst_grad:e}");
    for (z, y) in [(1e6, 0.0), (1e6, 1.0), (-1e6, 0.0), (-1e6, 1.0)] {
        let b = batch(vec![z], vec![y]);
        ensure!(bce_with_logits(&b).is_finite(), "loss at z={z}, y={y} is not finite");
        ensure!(bce_with_logits_grad(&b)[0].is_finite(), "gradient at z={z}, y={y} is not finite");
    }
    let t = within(Duration::from_secs(10), start)?;
    Ok(format!("max |loss - naive| {worst_value:.1e}, max grad rel err {worst_grad:.1e}, {t:.1?}"))
}

// ---------------------------------------------------------------------------
// 2. metric oracles

fn det_at(id: &str, x: f64, y: f64, score: f64) -> Detection {
    Detection { image_id: id.into(), bbox: BBox::new(x - 25.0, y - 25.0, x + 25.0, y + 25.0).unwrap(), score, stage: Stage::Detector }
}

/// Independent greedy matcher: score order (ties by box), nearest free gt.
fn greedy_tp(dets: &[&Detection], gts: &[(f64, f64)], radius: f64) -> usize {
    let mut order: Vec<&Detection> = dets.to_vec();
    order.sort_by(|a, b| a.rank_cmp(b));
    let mut free = vec![true; gts.len()];
    let mut tp = 0;
    for d in order {
        let (cx, cy) = d.center();
        let mut best: Option<(f64, usize)> = None;
        for (g, &(gx, gy)) in gts.iter().enumerate() {
            let dist = ((cx - gx).powi(2) + (cy - gy).powi(2)).sqrt();
            if free[g] && dist <= radius && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, g));
            }
        }
        if let Some((_, g)) = best {
            free[g] = false;
            tp += 1;
        }
    }
    tp
}

/// AP by re-matching at every distinct score threshold, then integrating
/// the precision envelope over recall.
fn brute_ap(dets: &[Detection], gts: &[(f64, f64)], radius: f64) -> f64 {
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pr = Vec::new();
    for &t in &thresholds {
        let admitted: Vec<&Detection> = dets.iter().filter(|d| d.score >= t).collect();
        let tp = greedy_tp(&admitted, gts, radius);
        pr.push((tp as f64 / gts.len() as f64, tp as f64 / admitted.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..pr.len() {
        let envelope = pr[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (pr[k].0 - prev_recall) * envelope;
        prev_recall = pr[k].0;
    }
    ap
}

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// Maximum-cardinality assignment by exhaustive search.
fn optimal_tp(dets: &[(f64, f64)], gts: &[(f64, f64)], radius: f64, used: &mut Vec<bool>) -> usize {
    let Some((&(dx, dy), rest)) = dets.split_first() else { return 0 };
    let mut best = optimal_tp(rest, gts, radius, used);
    for g in 0..gts.len() {
        let (gx, gy) = gts[g];
        if !used[g] && ((dx - gx).powi(2) + (dy - gy).powi(2)).sqrt() <= radius {
            used[g] = true;
            best = best.max(1 + optimal_tp(rest, gts, radius, used));
            used[g] = false;
        }
    }
    best
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let radius = 30.0;
    for trial in 0..200 {
        let n_gt = rng.random_range(1..=5);
        let gts: Vec<(f64, f64)> = (0..n_gt).map(|_| (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0))).collect();
        let n_det = rng.random_range(0..=10);
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                let score = f64::from(rng.random_range(1..=6u8)) / 7.0;
                if rng.random_bool(0.6) && !gts.is_empty() {
                    let (gx, gy) = gts[rng.random_range(0..gts.len())];
                    det_at("a", gx + rng.random_range(-35.0..35.0), gy + rng.random_range(-35.0..35.0), score)
                } else {
                    det_at("a", rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), score)
                }
            })
            .collect();
        let anns: Vec<PointAnnotation> = gts.iter().map(|&(x, y)| PointAnnotation::mitotic("a", x, y)).collect();
        let ap = average_precision(&dets, &anns, radius).map_err(|e| e.to_string())?;
        let oracle = brute_ap(&dets, &gts, radius);
        ensure!((ap - oracle).abs() <= 1e-9, "trial {trial}: AP {ap} vs brute force {oracle}");
    }
    for trial in 0..200 {
        let n = rng.random_range(2..=30);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let oracle = pair_count_auc(&scores, &labels);
        ensure!(auc == oracle, "trial {trial}: AUC {auc} vs pair count {oracle}");
    }
    let mut instances = 0;
    while instances < 200 {
        let n_gt = rng.random_range(1..=6);
        let mut gts: Vec<(f64, f64)> = Vec::new();
        while gts.len() < n_gt {
            let p = (rng.random_range(0.0..400.0), rng.random_range(0.0..400.0));
            if gts.iter().all(|g: &(f64, f64)| ((g.0 - p.0).powi(2) + (g.1 - p.1).powi(2)).sqrt() > 2.0 * radius) {
                gts.push(p);
            }
        }
        let n_det = rng.random_range(0..=6);
        let pts: Vec<(f64, f64)> = (0..n_det)
            .map(|_| {
                let (gx, gy) = gts[rng.random_range(0..gts.len())];
                (gx + rng.random_range(-40.0..40.0), gy + rng.random_range(-40.0..40.0))
            })
            .collect();
        let dets: Vec<Detection> = pts.iter().map(|&(x, y)| det_at("a", x, y, rng.random_range(0.0..1.0))).collect();
        let anns: Vec<PointAnnotation> = gts.iter().map(|&(x, y)| PointAnnotation::mitotic("a", x, y)).collect();
        let m = match_detections(&dets, &anns, radius).map_err(|e| e.to_string())?;
        let centres: Vec<(f64, f64)> = dets.iter().map(Detection::center).collect();
        let best = optimal_tp(&centres, &gts, radius, &mut vec![false; gts.len()]);
        ensure!(m.tp == best, "instance {instances}: greedy tp {} vs optimal {best}", m.tp);
        instances += 1;
    }
    let t = within(Duration::from_secs(30), start)?;
    Ok(format!("200 AP, 200 AUC and 200 matcher instances agree with their oracles, {t:.1?}"))
}

// ---------------------------------------------------------------------------
// 3. detector encode/decode and NMS

/// Reference NMS: repeatedly take the best remaining box and drop its overlaps.
fn reference_nms(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut remaining = dets.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let best = (0..remaining.len()).min_by(|&a, &b| remaining[a].rank_cmp(&remaining[b])).unwrap();
        let top = remaining.swap_remove(best);
        remaining.retain(|d| iou(&top.bbox, &d.bbox) <= thresh);
        kept.push(top);
    }
    kept
}

fn detector_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (256u32, 192u32);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let bw = rng.random_range(16.0..100.0);
        let bh = rng.random_range(16.0..100.0);
        let x0 = rng.random_range(0.0..w as f64 - bw);
        let y0 = rng.random_range(0.0..h as f64 - bh);
        let b = BBox::new(x0, y0, x0 + bw, y0 + bh).unwrap();
        let targets = encode_targets::<f64>((w, h), &[b], &[8], 1.5).map_err(|e| e.to_string())?;
        let maps = mitosis_core::detector::targets_as_predictions(&targets, 30.0);
        let dets = decode_detections(&maps, "a", 0.5, usize::MAX).map_err(|e| e.to_string())?;
        ensure!(!dets.is_empty() && dets.len() == targets.num_positive(), "trial {trial}: {} boxes decoded", dets.len());
        for d in &dets {
            let e = [d.bbox.x_min - b.x_min, d.bbox.y_min - b.y_min, d.bbox.x_max - b.x_max, d.bbox.y_max - b.y_max];
            worst = e.iter().fold(worst, |m, v| m.max(v.abs()));
        }
        for lv in &targets.levels {
            for (k, c) in lv.centerness.iter().enumerate() {
                ensure!((0.0..=1.0).contains(c), "trial {trial}: centerness {c} at {k}");
            }
        }
    }
    ensure!(worst <= 1e-4, "decoded boxes differ by up to {worst:e} px");
    for _ in 0..1000 {
        let [l, t, r, b]: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.5..60.0));
        let c = centerness([l, t, r, b]);
        ensure!((0.0..=1.0).contains(&c), "centerness {c} outside [0, 1]");
        ensure!(c < 1.0, "asymmetric distances gave centerness 1");
        ensure!(centerness([l, t, l, t]) == 1.0, "symmetric distances did not give 1");
    }
    for trial in 0..100 {
        let n = rng.random_range(0..40);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..200.0);
                let y = rng.random_range(0.0..200.0);
                let side = rng.random_range(10.0..60.0);
                let score = f64::from(rng.random_range(1..=10u8)) / 10.0;
                Detection { image_id: "a".into(), bbox: BBox::new(x, y, x + side, y + side).unwrap(), score, stage: Stage::Detector }
            })
            .collect();
        let thresh = rng.random_range(0.1..0.9);
        ensure!(nms(&dets, thresh) == reference_nms(&dets, thresh), "trial {trial}: NMS differs from the reference");
    }
    Ok(format!("100 boxes reconstructed within {worst:.1e} px, centerness laws hold, 100 NMS sets match"))
}

// ---------------------------------------------------------------------------
// 4. pipeline filtering laws

/// Marks planted as 5x5 squares with green 0; red encodes the score.
struct SquareProposer;

impl Proposer for SquareProposer {
    fn propose(&self, tile: &RgbImage, image_id: &str, _: &DecoderConfig) -> mitosis_core::Result<Vec<Detection>> {
        let mut out = Vec::new();
        let marked = |x: u32, y: u32| tile.get_pixel(x, y).0[1] == 0;
        for (x, y, p) in tile.enumerate_pixels() {
            if p.0[1] == 0 && (x == 0 || !marked(x - 1, y)) && (y == 0 || !marked(x, y - 1)) {
                let (cx, cy) = (x as f64 + 2.0, y as f64 + 2.0);
                out.push(Detection {
                    image_id: image_id.into(),
                    bbox: BBox::new(cx - 25.0, cy - 25.0, cx + 25.0, cy + 25.0)?,
                    score: p.0[0] as f64 / 255.0,
                    stage: Stage::Detector,
                });
            }
        }
        Ok(out)
    }
}

fn square_scene(rng: &mut ChaCha8Rng) -> (RgbImage, Vec<PointAnnotation>) {
    let mut img = RgbImage::from_pixel(300, 300, Rgb([255, 255, 255]));
    let mut gts = Vec::new();
    let mut centres: Vec<(u32, u32)> = Vec::new();
    while centres.len() < 10 {
        let c = (rng.random_range(10..290), rng.random_range(10..290));
        if centres.iter().any(|o: &(u32, u32)| o.0.abs_diff(c.0) < 20 && o.1.abs_diff(c.1) < 20) {
            continue;
        }
        centres.push(c);
        let red = rng.random_range(20..=250u8);
        for y in c.1 - 2..=c.1 + 2 {
            for x in c.0 - 2..=c.0 + 2 {
                img.put_pixel(x, y, Rgb([red, 0, 0]));
            }
        }
        if rng.random_bool(0.5) {
            gts.push(PointAnnotation::mitotic("a", c.0 as f64, c.1 as f64));
        }
    }
    (img, gts)
}

fn pipeline_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for trial in 0..20 {
        let (img, gts) = square_scene(&mut rng);
        if gts.is_empty() {
            continue;
        }
        let cfg = PipelineConfig { detector_thresh: rng.random_range(0.1..0.6), tile_size: 128, tile_overlap: 64, ..Default::default() };
        let cands = detect_candidates(&img, "a", &SquareProposer, &cfg).map_err(|e| e.to_string())?;
        ensure!(cands.iter().all(|c| c.score >= cfg.detector_thresh), "trial {trial}: candidate below the detector threshold");

        let all = refine_candidates(&img, &cands, |_, _| Ok(1.0), &cfg).map_err(|e| e.to_string())?;
        let key = |d: &Detection| (d.bbox.x_min.to_bits(), d.bbox.y_min.to_bits());
        let a: BTreeSet<_> = all.iter().map(key).collect();
        let b: BTreeSet<_> = cands.iter().map(key).collect();
        ensure!(a == b && all.len() == cands.len(), "trial {trial}: constant-1 classifier changed the set");

        let matched = match_detections(&cands, &gts, 30.0).map_err(|e| e.to_string())?;
        let tp_boxes: HashSet<_> = matched.pairs.iter().map(|p| key(&cands[p.detection])).collect();
        let oracle = refine_candidates(&img, &cands, |d, _| Ok(if tp_boxes.contains(&key(d)) { 1.0 } else { 0.0 }), &cfg)
            .map_err(|e| e.to_string())?;
        let m = match_detections(&oracle, &gts, 30.0).map_err(|e| e.to_string())?;
        ensure!(oracle.is_empty() || m.fp == 0, "trial {trial}: oracle classifier left {} false positives", m.fp);

        let prob = |d: &Detection| ((d.bbox.x_min * 12.9898 + d.bbox.y_min * 78.233).sin() * 43758.5453).rem_euclid(1.0);
        let mut last = usize::MAX;
        for step in 1..20 {
            let tc = step as f64 / 20.0;
            let c = PipelineConfig { classifier_thresh: tc, ..cfg.clone() };
            let kept = refine_candidates(&img, &cands, |d, _| Ok(prob(d)), &c).map_err(|e| e.to_string())?.len();
            ensure!(kept <= last, "trial {trial}: raising the classifier threshold to {tc} kept more ({kept} > {last})");
            last = kept;
        }
        checked += 1;
    }
    Ok(format!("{checked} scenes: constant classifier is the identity, oracle precision 1.0, threshold sweep monotone"))
}

// ---------------------------------------------------------------------------
// 5. synthetic end-to-end

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let (set, pixels) = generate(&SyntheticConfig { n_images: 200, seed: 1, ..Default::default() }).map_err(|e| e.to_string())?;
    let samples: Vec<ImageSample> = set
        .images
        .iter()
        .zip(pixels)
        .map(|(r, p)| ImageSample { record: r.clone(), annotations: set.annotations_for(&r.image_id).cloned().collect(), pixels: p })
        .collect();
    let (train, test) = samples.split_at(160);

    let mut dc = DetectorTrainConfig::new(3);
    dc.profile.epochs = 6;
    let (detector, _) = train_detector::<f32>(train, &[], &dc).map_err(|e| e.to_string())?;

    let mut patches = Vec::new();
    for s in train {
        for a in &s.annotations {
            let label = u8::from(a.category == Category::Mitotic);
            patches.push(extract_patch(&s.pixels, &s.record.image_id, (a.x, a.y), 50, Some(label)).map_err(|e| e.to_string())?);
        }
    }
    let mut cc = ClassifierTrainConfig::for_task(Task::RefineCls, 4).map_err(|e| e.to_string())?;
    cc.profile.epochs = 6;
    cc.profile.optimizer = OptimizerKind::Adam;
    cc.profile.learning_rate = 3e-3;
    let (classifier, _) = train_classifier::<f32>(&patches, &[], &cc).map_err(|e| e.to_string())?;

    let sensitive = PipelineConfig { detector_thresh: 0.3, ..Default::default() };
    let r = filter_pipeline_f1_gain(test, &detector, &classifier, &sensitive, 30.0).map_err(|e| e.to_string())?;
    let default = filter_pipeline_f1_gain(test, &detector, &classifier, &PipelineConfig::default(), 30.0).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let summary = format!(
        "tau_d 0.3: detector F1 {:.4} (P {:.3} R {:.3}), two-stage F1 {:.4} (P {:.3} R {:.3}); \
         tau_d 0.5: {:.4} vs {:.4}; {t:.0?}",
        r.detector.f1, r.detector.precision, r.detector.recall, r.pipeline.f1, r.pipeline.precision, r.pipeline.recall,
        default.detector.f1, default.pipeline.f1,
    );
    ensure!(r.f1_gain() >= 0.02, "F1 gain {:.4} below 0.02: {summary}", r.f1_gain());
    ensure!(r.detector.recall >= r.pipeline.recall, "pipeline recall exceeds detector recall: {summary}");
    within(Duration::from_secs(600), start)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 6. split and fold integrity

fn random_set(rng: &mut ChaCha8Rng) -> AnnotationSet {
    let n = rng.random_range(3..40);
    let images: Vec<ImageRecord> = (0..n)
        .map(|i| ImageRecord {
            image_id: format!("im{i:03}"),
            path: format!("im{i:03}.png").into(),
            width: 100,
            height: 100,
            domain_tag: Some(["a", "b", "c"][rng.random_range(0..3)].into()),
        })
        .collect();
    let mut anns = Vec::new();
    for img in &images {
        for _ in 0..rng.random_range(0..4) {
            anns.push(PointAnnotation::mitotic(img.image_id.clone(), rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)));
        }
    }
    AnnotationSet::new(images, anns).unwrap()
}

fn check_partition(whole: &AnnotationSet, parts: &[&AnnotationSet]) -> Result<(), String> {
    let mut seen = HashSet::new();
    for p in parts {
        let ids: HashSet<&str> = p.images.iter().map(|i| i.image_id.as_str()).collect();
        for id in &ids {
            ensure!(seen.insert(id.to_string()), "image {id} appears in two parts");
        }
        ensure!(p.annotations.iter().all(|a| ids.contains(a.image_id.as_str())), "annotation separated from its image");
    }
    ensure!(seen.len() == whole.images.len(), "{} of {} images assigned", seen.len(), whole.images.len());
    let total: usize = parts.iter().map(|p| p.annotations.len()).sum();
    ensure!(total == whole.annotations.len(), "{total} of {} annotations kept", whole.annotations.len());
    Ok(())
}

fn split_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..1000 {
        let set = random_set(&mut rng);
        let a = rng.random_range(0.2..0.8);
        let b = rng.random_range(0.05..(1.0 - a) * 0.9);
        let strat = [Stratify::None, Stratify::Image, Stratify::DomainTag][trial % 3];
        let spec = SplitSpec { ratios: vec![a, b, 1.0 - a - b], seed: trial as u64, stratify_by: strat };
        let parts = split_dataset(&set, &spec).map_err(|e| format!("trial {trial}: {e}"))?;
        check_partition(&set, &parts.iter().collect::<Vec<_>>()).map_err(|e| format!("split trial {trial}: {e}"))?;
        ensure!(split_dataset(&set, &spec).unwrap() == parts, "trial {trial}: split not reproducible");

        let k = rng.random_range(2..=set.images.len().min(6));
        let folds = kfold_split(&set, k, trial as u64).map_err(|e| format!("trial {trial}: {e}"))?;
        let vals: Vec<&AnnotationSet> = folds.iter().map(|f| &f.1).collect();
        check_partition(&set, &vals).map_err(|e| format!("fold trial {trial}: {e}"))?;
        for (f, (train, val)) in folds.iter().enumerate() {
            check_partition(&set, &[train, val]).map_err(|e| format!("fold trial {trial}, fold {f}: {e}"))?;
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ann = synth(&dir.path().join("data"), 10, 128, 6);
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        cli(&["prepare", "--annotations", s(&ann), "--out", s(&out), "--seed", "9"]).map_err(|e| format!("{e:#}"))?;
        let files: Vec<Vec<u8>> = ["index.json", "splits/train.json", "splits/val.json", "splits/test.json",
            "splits/train_annotations.json", "splits/val_annotations.json", "splits/test_annotations.json"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap())
            .collect();
        snapshots.push(files);
    }
    ensure!(snapshots[0] == snapshots[1], "split files differ between identical runs");
    Ok("1000 split and 1000 k-fold trials leak-free; split files byte-identical across reruns".into())
}

// ---------------------------------------------------------------------------
// 7. ensemble and schedule

fn ensemble_and_schedule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let patch = RgbImage::from_pixel(INPUT_SIDE, INPUT_SIDE, Rgb([120, 60, 200]));
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let probs: Vec<f64> = (0..rng.random_range(1..=9)).map(|_| rng.random_range(0.0..=1.0)).collect();
        let members: Vec<Box<dyn PatchScorer>> = probs.iter().map(|&p| Box::new(ConstantScorer(p)) as Box<dyn PatchScorer>).collect();
        let spec = EnsembleSpec::new(members).map_err(|e| e.to_string())?;
        let got = ensemble_predict(&spec, &patch).map_err(|e| e.to_string())?;
        let hand = probs.iter().sum::<f64>() / probs.len() as f64;
        worst = worst.max((got - hand).abs());
    }
    ensure!(worst <= 1e-12, "ensemble deviates from the hand mean by {worst:e}");
    let p = TrainingProfile::atypical_cls();
    let total = p.epochs as f64;
    let lr0 = 3e-5;
    ensure!(p.learning_rate == lr0, "atypical profile starts at {} instead of 3e-5", p.learning_rate);
    let at = [cosine_lr(lr0, 0.0, total), cosine_lr(lr0, total / 2.0, total), cosine_lr(lr0, total, total)];
    let expect = [lr0, lr0 / 2.0, 0.0];
    for (a, e) in at.iter().zip(expect) {
        ensure!((a - e).abs() <= 1e-12, "cosine schedule gave {at:?}, expected {expect:?}");
    }
    ensure!((p.lr_at(15) - lr0 / 2.0).abs() <= 1e-12, "profile schedule at mid-training is {}", p.lr_at(15));
    Ok(format!("100 ensembles within {worst:.1e} of hand means; cosine lr {at:?}"))
}

// ---------------------------------------------------------------------------
// 8. CLI reproducibility

fn cli_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ann = synth(&dir.path().join("data"), 12, 256, 8);
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let prep = dir.path().join(run).join("prep");
        let cv = dir.path().join(run).join("cv");
        cli(&["prepare", "--annotations", s(&ann), "--out", s(&prep), "--seed", "3"]).map_err(|e| format!("{e:#}"))?;
        cli(&["crossval", "--data", s(&prep), "--k", "4", "--out", s(&cv), "--seed", "3", "--epochs", "2",
            "--optimizer", "adam", "--lr", "3e-3"])
            .map_err(|e| format!("{e:#}"))?;
        reports.push((fs::read(cv.join("crossval.json")).unwrap(), fs::read(cv.join("crossval.csv")).unwrap()));
    }
    ensure!(reports[0] == reports[1], "crossval reports differ between identical runs");
    let report: CrossvalReport = serde_json::from_slice(&reports[0].0).map_err(|e| e.to_string())?;
    ensure!(report.folds.len() == 4, "{} fold rows", report.folds.len());
    let values: Vec<f64> = report.folds.iter().map(|f| f.balanced_accuracy).collect();
    let (mean, std) = aggregate_folds(&values).map_err(|e| e.to_string())?;
    ensure!(report.aggregate.mean == mean && report.aggregate.std == std, "aggregate row disagrees with aggregate_folds");
    let csv = String::from_utf8(reports[0].1.clone()).unwrap();
    ensure!(csv.lines().count() == 6 && csv.lines().last().unwrap().starts_with("mean,"), "unexpected csv layout:\n{csv}");
    Ok(format!("identical reports across runs; balanced accuracy {mean:.4} ± {std:.4} over 4 folds"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("loss correctness", loss_correctness),
        ("metric oracles", metric_oracles),
        ("detector round trip and NMS", detector_round_trip),
        ("pipeline filtering laws", pipeline_laws),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("split and fold integrity", split_integrity),
        ("ensemble and schedule", ensemble_and_schedule),
        ("CLI reproducibility", cli_reproducibility),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
