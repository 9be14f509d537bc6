//! Shared domain types and box geometry.
//!
//! Coordinates are continuous pixel floats with the origin at the top-left
//! corner, x to the right and y downward. Box area is
//! `(x_max - x_min) * (y_max - y_min)` with no `+1` correction.

use std::cmp::Ordering;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::{lit, Scalar};

/// Axis-aligned box with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T = f64> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        if !b.is_valid() {
            return invalid(format!(
                "box ({:?}, {:?}, {:?}, {:?}) must have finite corners and positive area",
                x_min, y_min, x_max, y_max
            ));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = lit::<T>(0.5);
        ((self.x_min + self.x_max) * half, (self.y_min + self.y_max) * half)
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Lexicographic order on `(x_min, y_min, x_max, y_max)`; used to break score ties.
    pub fn lex_cmp(&self, other: &Self) -> Ordering {
        let a = [self.x_min, self.y_min, self.x_max, self.y_max];
        let b = [other.x_min, other.y_min, other.x_max, other.y_max];
        for (x, y) in a.iter().zip(b.iter()) {
            match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}

/// Intersection over union. Symmetric; `iou(a, a) == 1`.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    if a == b {
        return T::one();
    }
    let inter = a.intersection_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one()).max(T::zero())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "mitotic figure")]
    Mitotic,
    #[serde(rename = "hard negative")]
    Impostor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtype {
    Normal,
    Atypical,
}

/// Point-level ground truth: a mitotic figure or an impostor cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype: Option<Subtype>,
}

impl PointAnnotation {
    pub fn mitotic(image_id: impl Into<String>, x: f64, y: f64) -> Self {
        PointAnnotation {
            image_id: image_id.into(),
            x,
            y,
            category: Category::Mitotic,
            subtype: None,
        }
    }

    pub fn impostor(image_id: impl Into<String>, x: f64, y: f64) -> Self {
        PointAnnotation {
            image_id: image_id.into(),
            x,
            y,
            category: Category::Impostor,
            subtype: None,
        }
    }

    pub fn is_mitotic(&self) -> bool {
        self.category == Category::Mitotic
    }
}

/// Square box of side `side` centred on the point. No clamping to image bounds.
pub fn point_to_box(p: &PointAnnotation, side: f64) -> Result<BBox> {
    if !(side > 0.0) || !side.is_finite() {
        return invalid(format!("box side must be positive, got {side}"));
    }
    let half = side / 2.0;
    BBox::new(p.x - half, p.y - half, p.x + half, p.y + half)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detector,
    Pipeline,
}

/// A scored box. Serialises to the flat JSON-lines record
/// `{"image_id","x_min","y_min","x_max","y_max","score","stage"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
    pub stage: Stage,
}

impl Detection {
    pub fn center(&self) -> (f64, f64) {
        self.bbox.center()
    }

    /// Descending score, then lexicographic box order.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.bbox.lex_cmp(&other.bbox))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub domain_tag: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn point_to_box_examples() {
        let p = PointAnnotation::mitotic("a", 100.0, 100.0);
        assert_eq!(point_to_box(&p, 50.0).unwrap(), b(75.0, 75.0, 125.0, 125.0));
        let p = PointAnnotation::mitotic("a", 0.0, 0.0);
        assert_eq!(point_to_box(&p, 50.0).unwrap(), b(-25.0, -25.0, 25.0, 25.0));
        let p = PointAnnotation::mitotic("a", 10.5, 20.5);
        assert_eq!(point_to_box(&p, 3.0).unwrap(), b(9.0, 19.0, 12.0, 22.0));
    }

    #[test]
    fn point_to_box_rejects_bad_side() {
        let p = PointAnnotation::mitotic("a", 1.0, 1.0);
        assert!(point_to_box(&p, 0.0).is_err());
        assert!(point_to_box(&p, -3.0).is_err());
        assert!(point_to_box(&p, f64::NAN).is_err());
    }

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&a, &b(1.0, 0.0, 3.0, 2.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&a, &b(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn iou_generic_over_f32() {
        let a = BBox::<f32>::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let c = BBox::<f32>::new(1.0, 0.0, 3.0, 2.0).unwrap();
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn detection_json_is_flat() {
        let d = Detection {
            image_id: "img".into(),
            bbox: b(1.0, 2.0, 3.0, 4.0),
            score: 0.5,
            stage: Stage::Pipeline,
        };
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(
            s,
            r#"{"image_id":"img","x_min":1.0,"y_min":2.0,"x_max":3.0,"y_max":4.0,"score":0.5,"stage":"pipeline"}"#
        );
        let back: Detection = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.01..80.0f64, 0.01..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            let ba = iou(&c, &a);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn point_box_center_roundtrip(x in 0.0..2000.0f64, y in 0.0..2000.0f64, side in 0.5..200.0f64) {
            let p = PointAnnotation::mitotic("a", x, y);
            let bx = point_to_box(&p, side).unwrap();
            let (cx, cy) = bx.center();
            prop_assert!((cx - x).abs() <= 1e-12 * x.abs().max(1.0));
            prop_assert!((cy - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}
