use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Square crop around a candidate or annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub pixels: RgbImage,
    /// Centre in the source image frame.
    pub center: (f64, f64),
    pub label: Option<u8>,
    pub source_image_id: String,
}

impl PatchSample {
    pub fn side(&self) -> u32 {
        self.pixels.width()
    }
}

/// Crop a `side` x `side` patch centred on `center`, replicating edge pixels
/// where the window leaves the image. The patch pixel at `(side/2, side/2)`
/// is the source pixel at the rounded centre.
pub fn extract_patch(
    image: &RgbImage,
    source_image_id: &str,
    center: (f64, f64),
    side: u32,
    label: Option<u8>,
) -> Result<PatchSample> {
    if side == 0 {
        return invalid("patch side must be positive");
    }
    let (w, h) = image.dimensions();
    let (x, y) = center;
    if !(x >= 0.0 && y >= 0.0 && x <= w as f64 && y <= h as f64) {
        return invalid(format!("patch centre ({x}, {y}) lies outside the {w}x{h} image"));
    }
    if let Some(l) = label {
        if l > 1 {
            return invalid(format!("patch label must be 0 or 1, got {l}"));
        }
    }
    let cx = (x.round() as i64).min(w as i64 - 1);
    let cy = (y.round() as i64).min(h as i64 - 1);
    let half = (side / 2) as i64;
    let (x0, y0) = (cx - half, cy - half);
    let pixels = RgbImage::from_fn(side, side, |i, j| {
        let sx = (x0 + i as i64).clamp(0, w as i64 - 1) as u32;
        let sy = (y0 + j as i64).clamp(0, h as i64 - 1) as u32;
        *image.get_pixel(sx, sy)
    });
    Ok(PatchSample { pixels, center, label, source_image_id: source_image_id.to_string() })
}

/// Bilinear resize to `side` x `side` with corner-aligned sampling: output
/// pixel `i` samples source coordinate `i * (in - 1) / (out - 1)`, so corner
/// pixels are preserved and equal sizes are an exact copy.
pub fn resize_to_input(image: &RgbImage, side: u32) -> Result<RgbImage> {
    if side == 0 {
        return invalid("resize side must be positive");
    }
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return invalid("cannot resize an empty image");
    }
    if (w, h) == (side, side) {
        return Ok(image.clone());
    }
    let scale = |n_in: u32| {
        if side == 1 {
            0.0
        } else {
            (n_in - 1) as f64 / (side - 1) as f64
        }
    };
    let (sx, sy) = (scale(w), scale(h));
    let centre_only = side == 1;
    Ok(RgbImage::from_fn(side, side, |i, j| {
        let (fx, fy) = if centre_only {
            ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0)
        } else {
            (i as f64 * sx, j as f64 * sy)
        };
        sample_bilinear(image, fx, fy)
    }))
}

/// Bilinear sample with edge clamping; rounds to the nearest 8-bit value.
pub(crate) fn sample_bilinear(image: &RgbImage, fx: f64, fy: f64) -> Rgb<u8> {
    let (w, h) = image.dimensions();
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as u32;
    let y0 = fy.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let p00 = image.get_pixel(x0, y0).0;
    let p10 = image.get_pixel(x1, y0).0;
    let p01 = image.get_pixel(x0, y1).0;
    let p11 = image.get_pixel(x1, y1).0;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - ax) + p10[c] as f64 * ax;
        let bottom = p01[c] as f64 * (1.0 - ax) + p11[c] as f64 * ax;
        out[c] = (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub file: String,
    pub label: u8,
    pub source_image_id: String,
    pub x: f64,
    pub y: f64,
}

/// `{"patches": [...]}` index that accompanies a directory of PNG patches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub patches: Vec<PatchIndexEntry>,
}

impl PatchIndex {
    /// Load all listed patches relative to `root`.
    pub fn load(&self, root: &Path) -> Result<Vec<PatchSample>> {
        self.patches
            .iter()
            .map(|e| {
                let pixels = image::open(root.join(&e.file))?.to_rgb8();
                Ok(PatchSample {
                    pixels,
                    center: (e.x, e.y),
                    label: Some(e.label),
                    source_image_id: e.source_image_id.clone(),
                })
            })
            .collect()
    }
}

pub fn write_patch_index(index: &PatchIndex, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(index)?)?;
    Ok(())
}

pub fn read_patch_index(path: &Path) -> Result<PatchIndex> {
    let index: PatchIndex = serde_json::from_str(&fs::read_to_string(path)?)?;
    if let Some((i, e)) = index.patches.iter().enumerate().find(|(_, e)| e.label > 1) {
        return Err(crate::error::Error::Parse { index: i, message: format!("label {} is not 0 or 1", e.label) });
    }
    Ok(index)
}
