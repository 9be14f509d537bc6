//! Training loss for the detection head: focal loss on the class logit,
//! `-ln(IoU)` on box distances and binary cross-entropy on centerness, the
//! last two over positive locations only. Weights are 1:1:1 and every term is
//! divided by the number of positives.
//!
//! Head channels are `[cls, l, t, r, b, centerness]`; box channels hold
//! `ln(distance / stride)`.

use super::targets::{LevelPredictions, LevelTargets};
use crate::classifier::{sigmoid_unchecked, softplus};
use crate::nn::Tensor;
use crate::scalar::{lit, Scalar};

pub const HEAD_CHANNELS: usize = 6;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Raw box outputs are clamped here before exponentiation.
const MAX_LOG_DISTANCE: f64 = 12.0;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    /// Centerness cross-entropy minus the entropy of its target, so a
    /// perfect prediction scores zero. The gradient is unaffected.
    pub ctr: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.ctr
    }
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.ctr += o.ctr;
    }
}

/// Focal loss and its derivative with respect to the logit.
pub fn focal(z: f64, y: u8) -> (f64, f64) {
    let (a, g) = (FOCAL_ALPHA, FOCAL_GAMMA);
    let p = sigmoid_unchecked(z);
    if y == 1 {
        let log_p = -softplus(-z);
        let q = 1.0 - p;
        (-a * q.powf(g) * log_p, a * q.powf(g) * (g * p * log_p - q))
    } else {
        let log_q = -softplus(z);
        ((a - 1.0) * p.powf(g) * log_q, (1.0 - a) * p.powf(g) * (p - g * (1.0 - p) * log_q))
    }
}

/// `-ln(I/U)` between predicted and target `(l, t, r, b)` distances sharing
/// one anchor point, with the gradient with respect to the predictions.
pub fn iou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [lt, tt, rt, bt] = target;
    let wi = l.min(lt) + r.min(rt);
    let hi = t.min(tt) + b.min(bt);
    let inter = wi * hi;
    let union = (l + r) * (t + b) + (lt + rt) * (tt + bt) - inter;
    let loss = union.ln() - inter.ln();
    let di = [
        if l < lt { hi } else { 0.0 },
        if t < tt { wi } else { 0.0 },
        if r < rt { hi } else { 0.0 },
        if b < bt { wi } else { 0.0 },
    ];
    let da = [t + b, l + r, t + b, l + r];
    let grad = std::array::from_fn(|k| (da[k] - di[k]) / union - di[k] / inter);
    (loss, grad)
}

fn entropy(t: f64) -> f64 {
    let term = |v: f64| if v > 0.0 { -v * v.ln() } else { 0.0 };
    term(t) + term(1.0 - t)
}

/// Read a head output as predictions in pixel units.
pub fn head_to_predictions<T: Scalar>(out: &Tensor<T>, stride: usize) -> LevelPredictions<T> {
    let n = out.height * out.width;
    let s = lit::<T>(stride as f64);
    let cap = lit::<T>(MAX_LOG_DISTANCE);
    let boxes = (0..n).map(|k| std::array::from_fn(|c| s * out.data[(c + 1) * n + k].min(cap).exp())).collect();
    LevelPredictions {
        stride,
        height: out.height,
        width: out.width,
        cls_logit: out.plane(0).to_vec(),
        boxes,
        ctr_logit: out.plane(5).to_vec(),
    }
}

/// Loss of one head output against its targets, divided by `normaliser`.
/// Gradients are added into `grad` (same shape as `out`).
pub fn head_loss<T: Scalar>(out: &Tensor<T>, targets: &LevelTargets<T>, normaliser: f64, grad: &mut Tensor<T>) -> LossParts {
    assert_eq!(out.channels, HEAD_CHANNELS, "detector head must have {HEAD_CHANNELS} channels");
    assert_eq!((out.height, out.width), (targets.height, targets.width), "head output and targets disagree on grid size");
    let n = out.height * out.width;
    let inv = 1.0 / normaliser;
    let stride = targets.stride as f64;
    let mut parts = LossParts::default();
    for k in 0..n {
        let y = targets.cls[k];
        let (l, g) = focal(out.data[k].as_f64(), y);
        parts.cls += l * inv;
        grad.data[k] += lit::<T>(g * inv);
        if y != 1 {
            continue;
        }
        let raw: [f64; 4] = std::array::from_fn(|c| out.data[(c + 1) * n + k].as_f64());
        let pred = raw.map(|r| stride * r.min(MAX_LOG_DISTANCE).exp());
        let (l, g) = iou_loss(pred, targets.boxes[k].map(Scalar::as_f64));
        parts.reg += l * inv;
        for c in 0..4 {
            let through = if raw[c] < MAX_LOG_DISTANCE { pred[c] } else { 0.0 };
            grad.data[(c + 1) * n + k] += lit::<T>(g[c] * through * inv);
        }
        let z = out.data[5 * n + k].as_f64();
        let t = targets.centerness[k].as_f64();
        parts.ctr += (softplus(z) - z * t - entropy(t)) * inv;
        grad.data[5 * n + k] += lit::<T>((sigmoid_unchecked(z) - t) * inv);
    }
    parts
}
