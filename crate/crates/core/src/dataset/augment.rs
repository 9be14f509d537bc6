//! Seeded image augmentations.
//!
//! Every call derives its randomness from `(config.seed, stream)` alone, so
//! results do not depend on the order in which samples are processed.

use std::str::FromStr;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patch::{sample_bilinear, PatchSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    RefineCls,
    AtypicalCls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Perspective,
    ColorJitter,
    DefocusBlur,
    RandomResizedCrop,
    HorizontalFlip,
    /// Applied when the sample is converted to a tensor; no-op on pixels.
    Normalize,
    RandomCrop,
    /// Horizontal or vertical, chosen at random.
    Flip,
    Rotation,
    Elastic,
    GridDistortion,
}

impl Transform {
    const NAMES: [(&'static str, Transform); 11] = [
        ("perspective", Transform::Perspective),
        ("color_jitter", Transform::ColorJitter),
        ("defocus_blur", Transform::DefocusBlur),
        ("random_resized_crop", Transform::RandomResizedCrop),
        ("horizontal_flip", Transform::HorizontalFlip),
        ("normalize", Transform::Normalize),
        ("random_crop", Transform::RandomCrop),
        ("flip", Transform::Flip),
        ("rotation", Transform::Rotation),
        ("elastic", Transform::Elastic),
        ("grid_distortion", Transform::GridDistortion),
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES.iter().find(|(_, t)| *t == self).map(|(n, _)| *n).unwrap_or("?")
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Config(format!("unknown transform `{s}`")))
    }
}

impl Task {
    pub fn default_transforms(self) -> Vec<Transform> {
        use Transform::*;
        match self {
            Task::Detection => vec![Perspective, ColorJitter, DefocusBlur],
            Task::RefineCls => vec![RandomResizedCrop, HorizontalFlip, Normalize],
            Task::AtypicalCls => vec![RandomCrop, Flip, Rotation, ColorJitter, DefocusBlur, Elastic, GridDistortion],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub task: Task,
    pub transforms: Vec<Transform>,
    pub seed: u64,
    /// Chance that each listed transform fires.
    pub probability: f64,
}

impl AugmentationConfig {
    pub fn for_task(task: Task, seed: u64) -> Self {
        AugmentationConfig { task, transforms: task.default_transforms(), seed, probability: 0.5 }
    }

    pub fn none(task: Task) -> Self {
        AugmentationConfig { task, transforms: Vec::new(), seed: 0, probability: 0.5 }
    }

    pub fn with_names(task: Task, names: &[&str], seed: u64, probability: f64) -> Result<Self> {
        let transforms = names.iter().map(|n| n.parse()).collect::<Result<Vec<_>>>()?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Config(format!("augmentation probability must lie in [0, 1], got {probability}")));
        }
        Ok(AugmentationConfig { task, transforms, seed, probability })
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Augment a patch. Shape and label are preserved.
pub fn augment(p: &PatchSample, cfg: &AugmentationConfig, stream: u64) -> Result<PatchSample> {
    let mut rng = cfg.rng(stream);
    let mut pixels = p.pixels.clone();
    for &t in &cfg.transforms {
        if rng.random::<f64>() >= cfg.probability {
            continue;
        }
        pixels = match t {
            Transform::Normalize => pixels,
            Transform::Perspective => perspective(&pixels, &[], &mut rng).0,
            Transform::HorizontalFlip => flip(&pixels, &[], true).0,
            Transform::Flip => {
                let horizontal = rng.random::<bool>();
                flip(&pixels, &[], horizontal).0
            }
            Transform::Rotation => rotate(&pixels, &[], &mut rng).0,
            Transform::ColorJitter => color_jitter(&pixels, &mut rng),
            Transform::DefocusBlur => defocus_blur(&pixels, &mut rng),
            Transform::RandomResizedCrop => random_resized_crop(&pixels, &mut rng, 0.5, true),
            Transform::RandomCrop => random_resized_crop(&pixels, &mut rng, 0.64, false),
            Transform::Elastic => elastic(&pixels, &mut rng),
            Transform::GridDistortion => grid_distortion(&pixels, &mut rng),
        };
    }
    Ok(PatchSample { pixels, ..p.clone() })
}

/// Augment a whole image together with point positions. Only transforms
/// that map points exactly are allowed here.
pub fn augment_scene(
    image: &RgbImage,
    points: &[(f64, f64)],
    cfg: &AugmentationConfig,
    stream: u64,
) -> Result<(RgbImage, Vec<(f64, f64)>)> {
    let mut rng = cfg.rng(stream);
    let mut img = image.clone();
    let mut pts = points.to_vec();
    for &t in &cfg.transforms {
        if matches!(t, Transform::RandomResizedCrop | Transform::RandomCrop | Transform::Elastic | Transform::GridDistortion) {
            return Err(Error::Config(format!("transform `{}` cannot be applied to annotated scenes", t.name())));
        }
        if rng.random::<f64>() >= cfg.probability {
            continue;
        }
        (img, pts) = match t {
            Transform::Perspective => perspective(&img, &pts, &mut rng),
            Transform::HorizontalFlip => flip(&img, &pts, true),
            Transform::Flip => {
                let horizontal = rng.random::<bool>();
                flip(&img, &pts, horizontal)
            }
            Transform::Rotation => rotate(&img, &pts, &mut rng),
            Transform::ColorJitter => (color_jitter(&img, &mut rng), pts),
            Transform::DefocusBlur => (defocus_blur(&img, &mut rng), pts),
            _ => (img, pts),
        };
    }
    Ok((img, pts))
}

/// Resample `src` so that output pixel `(x, y)` reads `src` at `map(x, y)`.
fn remap(src: &RgbImage, map: impl Fn(f64, f64) -> (f64, f64)) -> RgbImage {
    RgbImage::from_fn(src.width(), src.height(), |x, y| {
        let (sx, sy) = map(x as f64, y as f64);
        sample_bilinear(src, sx, sy)
    })
}

fn flip(img: &RgbImage, pts: &[(f64, f64)], horizontal: bool) -> (RgbImage, Vec<(f64, f64)>) {
    let (w, h) = img.dimensions();
    let out = RgbImage::from_fn(w, h, |x, y| {
        if horizontal {
            *img.get_pixel(w - 1 - x, y)
        } else {
            *img.get_pixel(x, h - 1 - y)
        }
    });
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let pts = pts.iter().map(|&(x, y)| if horizontal { (wm - x, y) } else { (x, hm - y) }).collect();
    (out, pts)
}

fn rotate(img: &RgbImage, pts: &[(f64, f64)], rng: &mut ChaCha8Rng) -> (RgbImage, Vec<(f64, f64)>) {
    let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (cx, cy) = ((img.width() - 1) as f64 / 2.0, (img.height() - 1) as f64 / 2.0);
    let (s, c) = theta.sin_cos();
    let out = remap(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    });
    let pts = pts
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = (x - cx, y - cy);
            (c * dx - s * dy + cx, s * dx + c * dy + cy)
        })
        .collect();
    (out, pts)
}

/// Homography taking the four `src` corners onto `dst`.
fn homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (k, (&(x, y), &(u, v))) in src.iter().zip(dst.iter()).enumerate() {
        let r = 2 * k;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn apply_h(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = h * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

fn perspective(img: &RgbImage, pts: &[(f64, f64)], rng: &mut ChaCha8Rng) -> (RgbImage, Vec<(f64, f64)>) {
    let (w, h) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let scale = 0.08;
    let mut moved = corners;
    for c in moved.iter_mut() {
        c.0 += rng.random_range(-scale..=scale) * w;
        c.1 += rng.random_range(-scale..=scale) * h;
    }
    let (Some(fwd), Some(inv)) = (homography(&corners, &moved), homography(&moved, &corners)) else {
        return (img.clone(), pts.to_vec());
    };
    let out = remap(img, |x, y| apply_h(&inv, x, y));
    let pts = pts.iter().map(|&(x, y)| apply_h(&fwd, x, y)).collect();
    (out, pts)
}

fn color_jitter(img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    let brightness = rng.random_range(0.8..1.2);
    let contrast = rng.random_range(0.8..1.2);
    let saturation = rng.random_range(0.8..1.2);
    let gray = |p: &Rgb<u8>| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
    let mean = img.pixels().map(gray).sum::<f64>() / (img.width() * img.height()).max(1) as f64;
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let g = gray(p);
        let mut v = [0.0; 3];
        for c in 0..3 {
            let x = p[c] as f64 * brightness;
            let x = (x - mean * brightness) * contrast + mean * brightness;
            v[c] = (x - g * brightness) * saturation + g * brightness;
        }
        *p = Rgb(v.map(|x| x.round().clamp(0.0, 255.0) as u8));
    }
    out
}

fn defocus_blur(img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    let radius: i64 = rng.random_range(1..=2);
    let offsets: Vec<(i64, i64)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= radius * radius)
        .collect();
    let (w, h) = (img.width() as i64, img.height() as i64);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = [0u32; 3];
        for &(dx, dy) in &offsets {
            let sx = (x as i64 + dx).clamp(0, w - 1) as u32;
            let sy = (y as i64 + dy).clamp(0, h - 1) as u32;
            let p = img.get_pixel(sx, sy);
            for c in 0..3 {
                acc[c] += p[c] as u32;
            }
        }
        let n = offsets.len() as u32;
        Rgb(acc.map(|a| ((a + n / 2) / n) as u8))
    })
}

/// Crop a random window covering at least `min_area` of the image and
/// stretch it back to the original size.
fn random_resized_crop(img: &RgbImage, rng: &mut ChaCha8Rng, min_area: f64, free_aspect: bool) -> RgbImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let area = rng.random_range(min_area..=1.0);
    let aspect = if free_aspect { rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp() } else { 1.0 };
    let cw = (area * aspect).sqrt().min(1.0) * w;
    let ch = (area / aspect).sqrt().min(1.0) * h;
    let x0 = rng.random_range(0.0..=(w - cw).max(0.0));
    let y0 = rng.random_range(0.0..=(h - ch).max(0.0));
    let sx = if w > 1.0 { (cw - 1.0).max(0.0) / (w - 1.0) } else { 0.0 };
    let sy = if h > 1.0 { (ch - 1.0).max(0.0) / (h - 1.0) } else { 0.0 };
    remap(img, |x, y| (x0 + x * sx, y0 + y * sy))
}

fn smooth_field(field: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, d) in (-r..=r).enumerate() {
                    let (sx, sy) = if horizontal {
                        ((x as i64 + d).clamp(0, w as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + d).clamp(0, h as i64 - 1) as usize)
                    };
                    acc += kernel[k] * src[sy * w + sx];
                }
                out[y * w + x] = acc / ksum;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

fn elastic(img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let side = w.min(h) as f64;
    let sigma = (0.08 * side).max(1.0);
    let alpha = 0.05 * side;
    let mut fields = [0, 1].map(|_| {
        let raw: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        smooth_field(&raw, w, h, sigma)
    });
    for f in fields.iter_mut() {
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            f.iter_mut().for_each(|v| *v *= alpha / peak);
        }
    }
    let [dx, dy] = fields;
    remap(img, |x, y| {
        let i = y as usize * w + x as usize;
        (x + dx[i], y + dy[i])
    })
}

fn grid_distortion(img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    const CELLS: usize = 4;
    let mut axis = |len: f64| {
        let cell = (len - 1.0) / CELLS as f64;
        let mut nodes: Vec<f64> = (0..=CELLS).map(|k| k as f64 * cell).collect();
        for node in nodes.iter_mut().take(CELLS).skip(1) {
            *node += rng.random_range(-0.3..0.3) * cell;
        }
        (cell, nodes)
    };
    let (cx, nx) = axis(img.width() as f64);
    let (cy, ny) = axis(img.height() as f64);
    let warp = |v: f64, cell: f64, nodes: &[f64]| {
        if cell <= 0.0 {
            return v;
        }
        let k = ((v / cell).floor() as usize).min(CELLS - 1);
        let t = v / cell - k as f64;
        nodes[k] + t * (nodes[k + 1] - nodes[k])
    };
    remap(img, |x, y| (warp(x, cx, &nx), warp(y, cy, &ny)))
}
