//! Synthetic stained-tissue scenes with planted mitoses and look-alikes.
//!
//! Mitoses are dark blue-violet bars of small chromatin clumps (three arms
//! for atypical figures). Impostors are compact round clusters of clumps
//! of similar darkness and a slightly redder hue. Pale, larger interphase nuclei act as
//! clutter.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_annotations, AnnotationSet};
use crate::error::{invalid, Result};
use crate::types::{Category, ImageRecord, PointAnnotation, Subtype};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub width: u32,
    pub height: u32,
    /// Inclusive range of planted mitoses per image.
    pub mitoses: (usize, usize),
    pub impostors: (usize, usize),
    pub clutter: (usize, usize),
    /// Fraction of mitoses drawn with atypical morphology.
    pub atypical_fraction: f64,
    /// Minimum centre distance between planted objects.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_images: 200,
            width: 512,
            height: 512,
            mitoses: (2, 5),
            impostors: (2, 5),
            clutter: (6, 12),
            atypical_fraction: 0.3,
            min_separation: 64.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Mitosis { atypical: bool },
    Impostor,
    Clutter,
}

const BACKGROUND: [f64; 3] = [236.0, 196.0, 218.0];
const CHROMATIN: [f64; 3] = [58.0, 36.0, 118.0];
const IMPOSTOR: [f64; 3] = [70.0, 36.0, 112.0];
const NUCLEUS: [f64; 3] = [172.0, 142.0, 198.0];

/// Intensity layer: per-pixel blend weight towards one colour.
struct Layer {
    color: [f64; 3],
    weight: Vec<f64>,
}

fn splat(layer: &mut Layer, w: u32, h: u32, cx: f64, cy: f64, sx: f64, sy: f64, angle: f64, strength: f64) {
    let reach = 3.5 * sx.max(sy);
    let (c, s) = (angle.cos(), angle.sin());
    let x0 = (cx - reach).floor().max(0.0) as u32;
    let y0 = (cy - reach).floor().max(0.0) as u32;
    let x1 = ((cx + reach).ceil() as u32).min(w - 1);
    let y1 = ((cy + reach).ceil() as u32).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            let g = (-(u * u) / (2.0 * sx * sx) - (v * v) / (2.0 * sy * sy)).exp() * strength;
            let k = (y * w + x) as usize;
            // union of overlapping splats, not a sum
            layer.weight[k] = 1.0 - (1.0 - layer.weight[k]) * (1.0 - g.min(1.0));
        }
    }
}

fn draw_mitosis(layer: &mut Layer, w: u32, h: u32, cx: f64, cy: f64, atypical: bool, rng: &mut ChaCha8Rng) {
    let arms = if atypical { 3 } else { 2 };
    let base = rng.random_range(0.0..std::f64::consts::TAU);
    let half_len = rng.random_range(7.0..11.0);
    for arm in 0..arms {
        let angle = base + arm as f64 * std::f64::consts::TAU / arms as f64;
        let clumps = rng.random_range(3..=4);
        for i in 0..clumps {
            let t = (i as f64 + 0.5) / clumps as f64 * half_len;
            let jitter = Normal::new(0.0, 0.9).expect("positive std");
            let x = cx + angle.cos() * t + jitter.sample(rng);
            let y = cy + angle.sin() * t + jitter.sample(rng);
            let r = rng.random_range(1.6..2.4);
            splat(layer, w, h, x, y, r, r, 0.0, rng.random_range(0.85..1.0));
        }
    }
    splat(layer, w, h, cx, cy, 2.2, 2.2, 0.0, 0.9);
}

/// A compact round cluster of clumps: similar size and darkness to a
/// mitosis but without its elongated arrangement.
fn draw_impostor(layer: &mut Layer, w: u32, h: u32, cx: f64, cy: f64, rng: &mut ChaCha8Rng) {
    let clumps = rng.random_range(5..=7);
    let spread = rng.random_range(3.0..4.5);
    for _ in 0..clumps {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let d = spread * rng.random::<f64>().sqrt();
        let r = rng.random_range(1.8..2.6);
        splat(layer, w, h, cx + a.cos() * d, cy + a.sin() * d, r, r, 0.0, rng.random_range(0.85..1.0));
    }
}

fn place(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, taken: &[(f64, f64)], margin: f64) -> Option<(f64, f64)> {
    for _ in 0..200 {
        let x = rng.random_range(margin..cfg.width as f64 - margin);
        let y = rng.random_range(margin..cfg.height as f64 - margin);
        if taken.iter().all(|&(a, b)| (a - x).hypot(b - y) >= cfg.min_separation) {
            return Some((x, y));
        }
    }
    None
}

/// Render one scene and its annotations.
pub fn render_scene(cfg: &SyntheticConfig, image_id: &str, rng: &mut ChaCha8Rng) -> (RgbImage, Vec<PointAnnotation>) {
    let (w, h) = (cfg.width, cfg.height);
    let n = (w * h) as usize;
    let mut kinds = Vec::new();
    let count = |rng: &mut ChaCha8Rng, r: (usize, usize)| rng.random_range(r.0..=r.1.max(r.0));
    for _ in 0..count(rng, cfg.mitoses) {
        kinds.push(Kind::Mitosis { atypical: rng.random::<f64>() < cfg.atypical_fraction });
    }
    for _ in 0..count(rng, cfg.impostors) {
        kinds.push(Kind::Impostor);
    }
    let mut taken = Vec::new();
    let mut planted = Vec::new();
    for k in kinds {
        if let Some(p) = place(rng, cfg, &taken, 28.0) {
            taken.push(p);
            planted.push((k, p));
        }
    }
    for _ in 0..count(rng, cfg.clutter) {
        if let Some(p) = place(rng, cfg, &taken, 10.0) {
            taken.push(p);
            planted.push((Kind::Clutter, p));
        }
    }

    // Per-image stain strength shifts every colour alike.
    let stain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.15));
    let tint = |c: [f64; 3]| std::array::from_fn(|i| c[i] * stain[i]);
    let mut chromatin = Layer { color: tint(CHROMATIN), weight: vec![0.0; n] };
    let mut impostor = Layer { color: tint(IMPOSTOR), weight: vec![0.0; n] };
    let mut nucleus = Layer { color: tint(NUCLEUS), weight: vec![0.0; n] };
    let mut annotations = Vec::new();
    for &(k, (x, y)) in &planted {
        match k {
            Kind::Mitosis { atypical } => {
                draw_mitosis(&mut chromatin, w, h, x, y, atypical, rng);
                annotations.push(PointAnnotation {
                    image_id: image_id.to_string(),
                    x,
                    y,
                    category: Category::Mitotic,
                    subtype: Some(if atypical { Subtype::Atypical } else { Subtype::Normal }),
                });
            }
            Kind::Impostor => {
                draw_impostor(&mut impostor, w, h, x, y, rng);
                annotations.push(PointAnnotation::impostor(image_id, x, y));
            }
            Kind::Clutter => {
                let r = rng.random_range(9.0..13.0);
                splat(&mut nucleus, w, h, x, y, r, r * rng.random_range(0.7..1.0), rng.random_range(0.0..3.2), 0.7);
            }
        }
    }

    // Low-frequency stain variation on a coarse lattice plus pixel noise.
    let cell = 32u32;
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-12.0..12.0)).collect();
    let pixel_noise = Normal::new(0.0, 4.0).expect("positive std");
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (fx as u32, fy as u32);
            let (ax, ay) = (fx - ix as f64, fy - iy as f64);
            let at = |i: u32, j: u32| lattice[(j * gw + i) as usize];
            let shade = at(ix, iy) * (1.0 - ax) * (1.0 - ay)
                + at(ix + 1, iy) * ax * (1.0 - ay)
                + at(ix, iy + 1) * (1.0 - ax) * ay
                + at(ix + 1, iy + 1) * ax * ay;
            let k = (y * w + x) as usize;
            let mut c: [f64; 3] = std::array::from_fn(|i| BACKGROUND[i] * (0.5 + 0.5 * stain[i]) + shade);
            for layer in [&nucleus, &impostor, &chromatin] {
                let a = layer.weight[k];
                for ch in 0..3 {
                    c[ch] = c[ch] * (1.0 - a) + layer.color[ch] * a;
                }
            }
            let noise = pixel_noise.sample(rng);
            img.put_pixel(x, y, Rgb(c.map(|v| (v + noise).round().clamp(0.0, 255.0) as u8)));
        }
    }
    (img, annotations)
}

/// Generate a full synthetic dataset in memory.
pub fn generate(cfg: &SyntheticConfig) -> Result<(AnnotationSet, Vec<RgbImage>)> {
    if cfg.width < 64 || cfg.height < 64 {
        return invalid("synthetic images must be at least 64x64");
    }
    let mut records = Vec::with_capacity(cfg.n_images);
    let mut annotations = Vec::new();
    let mut images = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let id = format!("synth_{i:04}");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let (img, ann) = render_scene(cfg, &id, &mut rng);
        records.push(ImageRecord {
            image_id: id.clone(),
            path: format!("images/{id}.png").into(),
            width: cfg.width,
            height: cfg.height,
            domain_tag: Some(["canine", "human", "feline"][i % 3].to_string()),
        });
        annotations.extend(ann);
        images.push(img);
    }
    Ok((AnnotationSet::new(records, annotations)?, images))
}

/// Write images under `dir/images/` and the annotation file `dir/annotations.json`.
pub fn write_dataset(dir: &Path, cfg: &SyntheticConfig) -> Result<AnnotationSet> {
    let (set, images) = generate(cfg)?;
    fs::create_dir_all(dir.join("images"))?;
    for (rec, img) in set.images.iter().zip(&images) {
        img.save(dir.join(&rec.path))?;
    }
    write_annotations(&set, &dir.join("annotations.json"))?;
    Ok(set)
}
