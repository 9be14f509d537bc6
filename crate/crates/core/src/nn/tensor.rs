use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Scalar};

/// Single-sample feature map in channel-major (CHW) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Per-channel affine normalisation applied to `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.5; 3], std: [0.25; 3] }
    }
}

impl Normalization {
    /// Per-channel statistics over a collection of images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0u64;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Normalization::default();
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n as f64;
            std[c] = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
        }
        Normalization { mean, std }
    }

    pub fn to_tensor<T: Scalar>(&self, img: &RgbImage) -> Tensor<T> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Tensor::zeros(3, h, w);
        let scale: [T; 3] = std::array::from_fn(|c| lit(1.0 / (255.0 * self.std[c])));
        let shift: [T; 3] = std::array::from_fn(|c| lit(self.mean[c] / self.std[c]));
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                t.data[c * w * h + i] = lit::<T>(p[c] as f64) * scale[c] - shift[c];
            }
        }
        t
    }
}
