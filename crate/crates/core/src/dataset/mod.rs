//! Annotation ingestion, splitting, patch extraction and augmentation.

mod augment;
mod config;
mod patch;
mod split;

pub use augment::{augment, augment_scene, AugmentationConfig, Task, Transform};
pub use config::{
    cosine_lr, BackboneProfile, LrSchedule, OptimizerKind, TrainingProfile, BOX_SIDE, INPUT_SIDE, PATCH_SIDE,
};
pub use patch::{
    extract_patch, read_patch_index, resize_to_input, write_patch_index, PatchIndex, PatchIndexEntry, PatchSample,
};
pub use split::{kfold_assignments, kfold_split, split_counts, split_dataset, SplitSpec, Stratify};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Category, ImageRecord, PointAnnotation, Subtype};

/// Images plus their point annotations. Image ids are unique and every
/// annotation references a listed image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<PointAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageJson {
    id: String,
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationJson {
    image_id: String,
    x: f64,
    y: f64,
    category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subtype: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<ImageJson>,
    annotations: Vec<AnnotationJson>,
}

fn parse_category(s: &str) -> Option<Category> {
    match s {
        "mitotic figure" => Some(Category::Mitotic),
        "hard negative" => Some(Category::Impostor),
        _ => None,
    }
}

fn category_name(c: Category) -> &'static str {
    match c {
        Category::Mitotic => "mitotic figure",
        Category::Impostor => "hard negative",
    }
}

fn parse_subtype(s: &str) -> Option<Subtype> {
    match s {
        "normal" => Some(Subtype::Normal),
        "atypical" => Some(Subtype::Atypical),
        _ => None,
    }
}

fn subtype_name(s: Subtype) -> &'static str {
    match s {
        Subtype::Normal => "normal",
        Subtype::Atypical => "atypical",
    }
}

impl AnnotationSet {
    /// Build a set, checking id uniqueness, dangling references and bounds.
    pub fn new(images: Vec<ImageRecord>, annotations: Vec<PointAnnotation>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, img) in images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Parse { index: i, message: format!("image `{}` has zero size", img.image_id) });
            }
            if !seen.insert(img.image_id.as_str()) {
                return Err(Error::Parse { index: i, message: format!("duplicate image id `{}`", img.image_id) });
            }
        }
        let dims: BTreeMap<&str, (u32, u32)> =
            images.iter().map(|i| (i.image_id.as_str(), (i.width, i.height))).collect();
        for (i, a) in annotations.iter().enumerate() {
            let Some(&(w, h)) = dims.get(a.image_id.as_str()) else {
                return Err(Error::Parse { index: i, message: format!("annotation references unknown image `{}`", a.image_id) });
            };
            if !(a.x >= 0.0 && a.x <= w as f64 && a.y >= 0.0 && a.y <= h as f64) {
                return Err(Error::Parse {
                    index: i,
                    message: format!("point ({}, {}) lies outside image `{}` ({w}x{h})", a.x, a.y, a.image_id),
                });
            }
            if a.subtype.is_some() && a.category != Category::Mitotic {
                return Err(Error::Parse { index: i, message: "subtype is only allowed on mitotic figures".into() });
            }
        }
        Ok(AnnotationSet { images, annotations })
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn annotations_for<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a PointAnnotation> + 'a {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    /// Sub-set with the given images, in the original image order.
    pub fn subset(&self, keep: &HashSet<&str>) -> AnnotationSet {
        AnnotationSet {
            images: self.images.iter().filter(|i| keep.contains(i.image_id.as_str())).cloned().collect(),
            annotations: self.annotations.iter().filter(|a| keep.contains(a.image_id.as_str())).cloned().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = AnnotationFile {
            images: self
                .images
                .iter()
                .map(|i| ImageJson {
                    id: i.image_id.clone(),
                    file_name: i.path.to_string_lossy().into_owned(),
                    width: i.width,
                    height: i.height,
                    domain: i.domain_tag.clone(),
                })
                .collect(),
            annotations: self
                .annotations
                .iter()
                .map(|a| AnnotationJson {
                    image_id: a.image_id.clone(),
                    x: a.x,
                    y: a.y,
                    category: category_name(a.category).into(),
                    subtype: a.subtype.map(|s| subtype_name(s).into()),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(text)?;
        let images = file
            .images
            .into_iter()
            .map(|i| ImageRecord {
                image_id: i.id,
                path: PathBuf::from(i.file_name),
                width: i.width,
                height: i.height,
                domain_tag: i.domain,
            })
            .collect();
        let mut annotations = Vec::with_capacity(file.annotations.len());
        for (index, a) in file.annotations.into_iter().enumerate() {
            let category = parse_category(&a.category).ok_or_else(|| Error::Parse {
                index,
                message: format!("unknown category `{}`", a.category),
            })?;
            let subtype = match a.subtype.as_deref() {
                None => None,
                Some(s) => Some(parse_subtype(s).ok_or_else(|| Error::Parse {
                    index,
                    message: format!("unknown subtype `{s}`"),
                })?),
            };
            annotations.push(PointAnnotation { image_id: a.image_id, x: a.x, y: a.y, category, subtype });
        }
        AnnotationSet::new(images, annotations)
    }

    /// Decode every image relative to `root`, checking recorded dimensions.
    pub fn load_images(&self, root: &Path) -> Result<Vec<ImageSample>> {
        self.images
            .iter()
            .map(|rec| {
                let path = root.join(&rec.path);
                let pixels = image::open(&path)?.to_rgb8();
                if pixels.dimensions() != (rec.width, rec.height) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: decoded size {:?} does not match annotated {}x{}",
                        path.display(),
                        pixels.dimensions(),
                        rec.width,
                        rec.height
                    )));
                }
                Ok(ImageSample {
                    record: rec.clone(),
                    annotations: self.annotations_for(&rec.image_id).cloned().collect(),
                    pixels,
                })
            })
            .collect()
    }
}

/// Read and validate an annotation file.
pub fn parse_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path)?;
    AnnotationSet::from_json(&text)
}

pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    fs::write(path, set.to_json()?)?;
    Ok(())
}

/// A decoded image with its annotations.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub record: ImageRecord,
    pub annotations: Vec<PointAnnotation>,
    pub pixels: RgbImage,
}

impl ImageSample {
    pub fn mitotic(&self) -> impl Iterator<Item = &PointAnnotation> {
        self.annotations.iter().filter(|a| a.is_mitotic())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_IMAGES: &str = r#"{
      "images": [
        {"id": "a", "file_name": "a.png", "width": 100, "height": 80, "domain": "canine lymphoma"},
        {"id": "b", "file_name": "b.png", "width": 64, "height": 64}
      ],
      "annotations": [
        {"image_id": "a", "x": 10.0, "y": 20.0, "category": "mitotic figure", "subtype": "atypical"},
        {"image_id": "a", "x": 50.5, "y": 40.0, "category": "hard negative"},
        {"image_id": "b", "x": 0.0, "y": 64.0, "category": "mitotic figure"}
      ]
    }"#;

    #[test]
    fn parses_counts_and_categories() {
        let set = AnnotationSet::from_json(TWO_IMAGES).unwrap();
        assert_eq!(set.images.len(), 2);
        assert_eq!(set.annotations.len(), 3);
        let cats: Vec<_> = set.annotations.iter().map(|a| a.category).collect();
        assert_eq!(cats, vec![Category::Mitotic, Category::Impostor, Category::Mitotic]);
        assert_eq!(set.annotations[0].subtype, Some(Subtype::Atypical));
        assert_eq!(set.images[0].domain_tag.as_deref(), Some("canine lymphoma"));
    }

    #[test]
    fn dangling_image_reports_record_index() {
        let text = TWO_IMAGES.replace(r#""image_id": "b""#, r#""image_id": "zzz""#);
        match AnnotationSet::from_json(&text) {
            Err(Error::Parse { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_category_and_bad_subtype_rejected() {
        let text = TWO_IMAGES.replace("hard negative", "lymphocyte");
        assert!(matches!(AnnotationSet::from_json(&text), Err(Error::Parse { index: 1, .. })));
        let text = TWO_IMAGES.replace(r#""hard negative""#, r#""hard negative", "subtype": "normal""#);
        assert!(matches!(AnnotationSet::from_json(&text), Err(Error::Parse { index: 1, .. })));
    }

    #[test]
    fn out_of_bounds_point_rejected() {
        let text = TWO_IMAGES.replace(r#""x": 50.5"#, r#""x": 150.5"#);
        assert!(matches!(AnnotationSet::from_json(&text), Err(Error::Parse { index: 1, .. })));
    }

    #[test]
    fn duplicate_image_id_rejected() {
        let text = TWO_IMAGES.replace(r#""id": "b""#, r#""id": "a""#);
        assert!(AnnotationSet::from_json(&text).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_annotations(Path::new("/nonexistent/annotations.json")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn json_roundtrip() {
        let set = AnnotationSet::from_json(TWO_IMAGES).unwrap();
        let again = AnnotationSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn load_images_checks_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let set = AnnotationSet::from_json(TWO_IMAGES).unwrap();
        RgbImage::new(100, 80).save(dir.path().join("a.png")).unwrap();
        RgbImage::new(60, 64).save(dir.path().join("b.png")).unwrap();
        assert!(set.load_images(dir.path()).is_err());
        RgbImage::new(64, 64).save(dir.path().join("b.png")).unwrap();
        let loaded = set.load_images(dir.path()).unwrap();
        assert_eq!(loaded[0].annotations.len(), 2);
        assert_eq!(loaded[1].mitotic().count(), 1);
    }
}
