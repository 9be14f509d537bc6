//! Detection and classification metrics.
//!
//! Detections are matched to point annotations by the distance between the
//! box centre and the point. Matching is greedy in descending score order,
//! each ground-truth point can be claimed once.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{Detection, PointAnnotation};

/// Default matching radius in pixels (7.5 µm at 0.25 µm/px).
pub const DEFAULT_MATCH_RADIUS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Indices refer to the input slices.
    pub pairs: Vec<MatchPair>,
}

/// Index order of detections by descending score, then box, then input index.
fn ranked_indices(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[a].rank_cmp(dets[b]).then(a.cmp(&b)));
    order
}

/// Greedy claim of the nearest unmatched point within `radius`.
fn claim(center: (f64, f64), gts: &[&PointAnnotation], taken: &mut [bool], radius: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if taken[g] {
            continue;
        }
        let d = ((center.0 - gt.x).powi(2) + (center.1 - gt.y).powi(2)).sqrt();
        if d <= radius && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((g, d));
        }
    }
    if let Some((g, _)) = best {
        taken[g] = true;
    }
    best
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius > 0.0) || !radius.is_finite() {
        return invalid(format!("matching radius must be positive, got {radius}"));
    }
    Ok(())
}

/// Match detections of a single image against its mitotic ground-truth points.
///
/// Impostor annotations are ignored; `tp + fn` equals the number of mitotic
/// points and `tp + fp` the number of detections.
pub fn match_detections(dets: &[Detection], gts: &[PointAnnotation], radius: f64) -> Result<MatchResult> {
    check_radius(radius)?;
    let image = dets
        .first()
        .map(|d| d.image_id.as_str())
        .or_else(|| gts.first().map(|g| g.image_id.as_str()));
    if let Some(id) = image {
        let mixed = dets.iter().any(|d| d.image_id != id) || gts.iter().any(|g| g.image_id != id);
        if mixed {
            return invalid("match_detections requires detections and annotations of a single image");
        }
    }

    let det_refs: Vec<&Detection> = dets.iter().collect();
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].is_mitotic()).collect();
    let gt_refs: Vec<&PointAnnotation> = gt_idx.iter().map(|&i| &gts[i]).collect();
    let mut taken = vec![false; gt_refs.len()];
    let mut pairs = Vec::new();
    for d in ranked_indices(&det_refs) {
        if let Some((g, distance)) = claim(dets[d].center(), &gt_refs, &mut taken, radius) {
            pairs.push(MatchPair { detection: d, ground_truth: gt_idx[g], distance });
        }
    }
    let tp = pairs.len();
    Ok(MatchResult { tp, fp: dets.len() - tp, fn_: gt_refs.len() - tp, pairs })
}

/// `2tp / (2tp + fp + fn)`, zero when the denominator is zero.
pub fn f1_from_counts(tp: i64, fp: i64, fn_: i64) -> Result<f64> {
    if tp < 0 || fp < 0 || fn_ < 0 {
        return invalid(format!("counts must be non-negative: tp={tp} fp={fp} fn={fn_}"));
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 })
}

/// One point on the precision-recall curve, taken after all detections with
/// score `>= threshold` have been admitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall curve across images. Tied scores enter the ranking
/// together, so only one point is emitted per distinct score.
pub fn pr_curve(dets: &[Detection], gts: &[PointAnnotation], radius: f64) -> Result<(Vec<PrPoint>, usize)> {
    check_radius(radius)?;
    let mut by_image: BTreeMap<&str, Vec<&PointAnnotation>> = BTreeMap::new();
    for g in gts.iter().filter(|g| g.is_mitotic()) {
        by_image.entry(g.image_id.as_str()).or_default().push(g);
    }
    let n_gt: usize = by_image.values().map(Vec::len).sum();
    let mut taken: BTreeMap<&str, Vec<bool>> = by_image.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();

    let mut order: Vec<usize> = (0..dets.len()).collect();
    // image id is a secondary key so the global order is stable across input permutations
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| dets[a].image_id.cmp(&dets[b].image_id))
            .then_with(|| dets[a].bbox.lex_cmp(&dets[b].bbox))
            .then(a.cmp(&b))
    });

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (pos, &d) in order.iter().enumerate() {
        let det = &dets[d];
        let hit = match (by_image.get(det.image_id.as_str()), taken.get_mut(det.image_id.as_str())) {
            (Some(g), Some(t)) => claim(det.center(), g, t, radius).is_some(),
            _ => false,
        };
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order.get(pos + 1).is_none_or(|&next| dets[next].score != det.score);
        if group_ends {
            points.push(PrPoint {
                threshold: det.score,
                tp,
                fp,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                precision: tp as f64 / (tp + fp) as f64,
            });
        }
    }
    Ok((points, n_gt))
}

/// All-point interpolated average precision over the score ranking.
pub fn average_precision(dets: &[Detection], gts: &[PointAnnotation], radius: f64) -> Result<f64> {
    let (points, n_gt) = pr_curve(dets, gts, radius)?;
    if n_gt == 0 {
        return invalid("average precision needs at least one ground-truth mitotic figure");
    }
    Ok(ap_from_curve(&points))
}

fn ap_from_curve(points: &[PrPoint]) -> f64 {
    // precision envelope: running max from the right
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap.clamp(0.0, 1.0)
}

/// How the operating point for F1/precision/recall is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "kebab-case")]
pub enum ThresholdMode {
    Fixed(f64),
    BestF1,
}

impl std::str::FromStr for ThresholdMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "best-f1" {
            return Ok(ThresholdMode::BestF1);
        }
        match s.strip_prefix("fixed:").map(str::parse::<f64>) {
            Some(Ok(v)) if (0.0..=1.0).contains(&v) => Ok(ThresholdMode::Fixed(v)),
            _ => Err(crate::error::Error::Config(format!(
                "threshold must be `fixed:<v>` with v in [0,1] or `best-f1`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdMode::Fixed(v) => write!(f, "fixed:{v}"),
            ThresholdMode::BestF1 => write!(f, "best-f1"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub threshold_mode: ThresholdMode,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub radius: f64,
}

/// F1 at the chosen operating point plus AP over the full ranking.
pub fn detection_metrics(
    dets: &[Detection],
    gts: &[PointAnnotation],
    radius: f64,
    mode: ThresholdMode,
) -> Result<(DetectionMetrics, Vec<PrPoint>)> {
    let (points, n_gt) = pr_curve(dets, gts, radius)?;
    if n_gt == 0 {
        return invalid("detection metrics need at least one ground-truth mitotic figure");
    }
    let ap = ap_from_curve(&points);
    let at = |p: Option<&PrPoint>, threshold: f64| {
        let (tp, fp) = p.map(|p| (p.tp, p.fp)).unwrap_or((0, 0));
        (threshold, tp, fp)
    };
    let (threshold, tp, fp) = match mode {
        ThresholdMode::Fixed(t) => at(points.iter().rev().find(|p| p.threshold >= t), t),
        ThresholdMode::BestF1 => {
            let mut best = at(None, 1.0);
            let mut best_f1 = 0.0;
            for p in &points {
                let f = f1_from_counts(p.tp as i64, p.fp as i64, (n_gt - p.tp) as i64)?;
                if f > best_f1 {
                    best_f1 = f;
                    best = at(Some(p), p.threshold);
                }
            }
            best
        }
    };
    let fn_ = n_gt - tp;
    let metrics = DetectionMetrics {
        threshold_mode: mode,
        threshold,
        tp,
        fp,
        fn_,
        precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: tp as f64 / n_gt as f64,
        f1: f1_from_counts(tp as i64, fp as i64, fn_ as i64)?,
        ap,
        radius,
    };
    Ok((metrics, points))
}

fn check_binary(labels: &[u8], what: &str) -> Result<(usize, usize)> {
    let mut pos = 0;
    for (i, &l) in labels.iter().enumerate() {
        match l {
            0 => {}
            1 => pos += 1,
            _ => return invalid(format!("{what}: label at index {i} is {l}, expected 0 or 1")),
        }
    }
    Ok((pos, labels.len() - pos))
}

/// ROC AUC as the Mann-Whitney statistic; ties count one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid(format!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return invalid(format!("score at index {i} is NaN"));
    }
    let (n_pos, n_neg) = check_binary(labels, "roc_auc")?;
    if n_pos == 0 || n_neg == 0 {
        return invalid("roc_auc needs both classes present");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // twice the Mann-Whitney U, kept integral
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return invalid(format!("{} predictions but {} labels", preds.len(), labels.len()));
    }
    check_binary(preds, "balanced_accuracy predictions")?;
    let (n_pos, n_neg) = check_binary(labels, "balanced_accuracy")?;
    if n_pos == 0 || n_neg == 0 {
        return invalid("balanced accuracy needs both classes present in labels");
    }
    let tp = preds.iter().zip(labels).filter(|(p, l)| **p == 1 && **l == 1).count();
    let tn = preds.iter().zip(labels).filter(|(p, l)| **p == 0 && **l == 0).count();
    Ok((tp as f64 / n_pos as f64 + tn as f64 / n_neg as f64) / 2.0)
}

/// `(correct / total, tp / (tp + fn))`.
pub fn accuracy_and_recall(preds: &[u8], labels: &[u8]) -> Result<(f64, f64)> {
    if preds.len() != labels.len() {
        return invalid(format!("{} predictions but {} labels", preds.len(), labels.len()));
    }
    if labels.is_empty() {
        return invalid("accuracy needs at least one sample");
    }
    check_binary(preds, "accuracy predictions")?;
    let (n_pos, _) = check_binary(labels, "accuracy")?;
    if n_pos == 0 {
        return invalid("recall is undefined without positive labels");
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let tp = preds.iter().zip(labels).filter(|(p, l)| **p == 1 && **l == 1).count();
    Ok((correct as f64 / labels.len() as f64, tp as f64 / n_pos as f64))
}

/// Mean and Bessel-corrected sample standard deviation.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return invalid("cannot aggregate an empty list of fold values");
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Collected metrics. Each field is present only when it applies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_fold: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl EvalReport {
    pub fn with_folds(mut self, folds: Vec<f64>) -> Result<Self> {
        let (mean, std) = aggregate_folds(&folds)?;
        self.per_fold = Some(folds);
        self.mean = Some(mean);
        self.std = Some(std);
        Ok(self)
    }
}

/// Accuracy, recall, AUC, and balanced accuracy of thresholded probabilities.
/// Metrics that need both classes are omitted when only one is present.
pub fn classification_report(probs: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
    let (pos, neg) = check_binary(labels, "classification_report")?;
    let mut report = EvalReport::default();
    if !labels.is_empty() {
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        report.accuracy = Some(correct as f64 / labels.len() as f64);
    }
    if pos > 0 {
        report.recall = Some(accuracy_and_recall(&preds, labels)?.1);
    }
    if pos > 0 && neg > 0 {
        report.auc = Some(roc_auc(probs, labels)?);
        report.balanced_accuracy = Some(balanced_accuracy(&preds, labels)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, Stage};

    fn det(img: &str, cx: f64, cy: f64, score: f64) -> Detection {
        Detection {
            image_id: img.into(),
            bbox: BBox::new(cx - 25.0, cy - 25.0, cx + 25.0, cy + 25.0).unwrap(),
            score,
            stage: Stage::Detector,
        }
    }

    #[test]
    fn match_examples() {
        let gts = vec![PointAnnotation::mitotic("a", 100.0, 100.0)];
        let m = match_detections(&[det("a", 110.0, 110.0, 0.9)], &gts, 30.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        assert!((m.pairs[0].distance - 200f64.sqrt()).abs() < 1e-12);

        let gts3: Vec<_> = (0..3).map(|i| PointAnnotation::mitotic("a", 50.0 * i as f64, 0.0)).collect();
        let m = match_detections(&[], &gts3, 30.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 3));

        let dets = vec![det("a", 105.0, 100.0, 0.8), det("a", 110.0, 100.0, 0.9)];
        let m = match_detections(&dets, &gts, 30.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.pairs[0].detection, 1);
    }

    #[test]
    fn match_ignores_impostors_and_rejects_mixed_images() {
        let gts = vec![PointAnnotation::impostor("a", 100.0, 100.0)];
        let m = match_detections(&[det("a", 100.0, 100.0, 0.9)], &gts, 30.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 0));
        let gts = vec![PointAnnotation::mitotic("b", 100.0, 100.0)];
        assert!(match_detections(&[det("a", 100.0, 100.0, 0.9)], &gts, 30.0).is_err());
        assert!(match_detections(&[], &gts, 0.0).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_from_counts(1, 0, 0).unwrap(), 1.0);
        assert_eq!(f1_from_counts(0, 0, 0).unwrap(), 0.0);
        assert!((f1_from_counts(3, 1, 2).unwrap() - 6.0 / 9.0).abs() < 1e-15);
        assert!(f1_from_counts(-1, 0, 0).is_err());
    }

    #[test]
    fn ap_examples() {
        let gts = vec![PointAnnotation::mitotic("a", 100.0, 100.0)];
        assert_eq!(average_precision(&[det("a", 100.0, 100.0, 0.9)], &gts, 30.0).unwrap(), 1.0);
        let dets = vec![det("a", 400.0, 400.0, 0.9), det("a", 100.0, 100.0, 0.8)];
        assert!((average_precision(&dets, &gts, 30.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(average_precision(&dets, &[], 30.0).is_err());
    }

    #[test]
    fn fixed_and_best_threshold_modes() {
        let gts = vec![PointAnnotation::mitotic("a", 100.0, 100.0), PointAnnotation::mitotic("a", 300.0, 300.0)];
        let dets = vec![
            det("a", 100.0, 100.0, 0.9),
            det("a", 200.0, 200.0, 0.7),
            det("a", 300.0, 300.0, 0.3),
        ];
        let (m, _) = detection_metrics(&dets, &gts, 30.0, ThresholdMode::Fixed(0.5)).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 1));
        let (m, _) = detection_metrics(&dets, &gts, 30.0, ThresholdMode::BestF1).unwrap();
        // f1 at 0.9: 2/3, at 0.7: 1/2, at 0.3: 4/5
        assert_eq!(m.threshold, 0.3);
        assert!((m.f1 - 0.8).abs() < 1e-15);
        let (m, _) = detection_metrics(&dets, &gts, 30.0, ThresholdMode::Fixed(0.95)).unwrap();
        assert_eq!((m.tp, m.fp, m.f1), (0, 0, 0.0));
    }

    #[test]
    fn threshold_mode_parsing() {
        assert_eq!("best-f1".parse::<ThresholdMode>().unwrap(), ThresholdMode::BestF1);
        assert_eq!("fixed:0.25".parse::<ThresholdMode>().unwrap(), ThresholdMode::Fixed(0.25));
        assert!("fixed:2".parse::<ThresholdMode>().is_err());
        assert!("best".parse::<ThresholdMode>().is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.4; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(roc_auc(&[0.1, f64::NAN], &[1, 0]).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&[1; 10], &[1, 1, 1, 1, 1, 1, 1, 1, 0, 0]).unwrap(), 0.5);
        assert!(balanced_accuracy(&[1, 0], &[1]).is_err());
        assert!(balanced_accuracy(&[1, 0], &[1, 1]).is_err());
    }

    #[test]
    fn accuracy_recall_examples() {
        assert_eq!(accuracy_and_recall(&[1, 0], &[1, 0]).unwrap(), (1.0, 1.0));
        assert_eq!(accuracy_and_recall(&[1, 0, 0, 0], &[1, 0, 1, 0]).unwrap(), (0.75, 0.5));
        assert_eq!(accuracy_and_recall(&[0, 0, 0, 0], &[1, 1, 0, 0]).unwrap(), (0.5, 0.0));
        assert!(accuracy_and_recall(&[0, 0], &[0, 0]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let (m, s) = aggregate_folds(&[0.8, 0.9]).unwrap();
        assert!((m - 0.85).abs() < 1e-15);
        assert!((s - 0.070_710_678_118_654_76).abs() < 1e-12);
        assert_eq!(aggregate_folds(&[0.5]).unwrap(), (0.5, 0.0));
        assert_eq!(aggregate_folds(&[0.3; 4]).unwrap(), (0.3, 0.0));
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn report_folds_and_optional_fields() {
        let r = EvalReport::default().with_folds(vec![0.8, 0.9]).unwrap();
        assert!(r.std.unwrap() >= 0.0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("auc"));
        let r = classification_report(&[0.9, 0.2, 0.6], &[1, 0, 0], 0.5).unwrap();
        assert_eq!(r.accuracy, Some(2.0 / 3.0));
        assert_eq!(r.balanced_accuracy, Some(0.75));
        assert_eq!(r.auc, Some(1.0));
    }
}
