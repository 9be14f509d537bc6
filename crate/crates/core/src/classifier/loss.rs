//! Sigmoid and binary cross-entropy on raw logits.
//!
//! Per-sample loss uses the overflow-safe form
//! `max(z, 0) - z*y + ln(1 + exp(-|z|))`, which is finite for every finite
//! `z`. The gradient with respect to `z_i` is `(sigmoid(z_i) - y_i) / N`.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// `1 / (1 + exp(-z))` without overflow; caller guarantees `z` is finite.
#[inline]
pub fn sigmoid_unchecked<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> Result<T> {
    if !z.is_finite() {
        return invalid(format!("sigmoid input must be finite, got {z:?}"));
    }
    Ok(sigmoid_unchecked(z))
}

/// `ln(1 + exp(z))`, stable for large `|z|`.
#[inline]
pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Logits with binary labels, `|z| == |y| >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch<T> {
    z: Vec<T>,
    y: Vec<T>,
}

impl<T: Scalar> LogitBatch<T> {
    pub fn new(z: Vec<T>, y: Vec<T>) -> Result<Self> {
        if z.is_empty() {
            return invalid("logit batch must not be empty");
        }
        if z.len() != y.len() {
            return invalid(format!("{} logits but {} labels", z.len(), y.len()));
        }
        if let Some(i) = y.iter().position(|v| *v != T::zero() && *v != T::one()) {
            return invalid(format!("label at index {i} is {:?}, expected 0 or 1", y[i]));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return invalid(format!("logit at index {i} is not finite"));
        }
        Ok(LogitBatch { z, y })
    }

    pub fn from_labels(z: Vec<T>, labels: &[u8]) -> Result<Self> {
        let y = labels.iter().map(|&l| if l == 1 { T::one() } else if l == 0 { T::zero() } else { T::nan() }).collect();
        Self::new(z, y)
    }

    pub fn logits(&self) -> &[T] {
        &self.z
    }

    pub fn labels(&self) -> &[T] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Per-sample loss with an optional positive-class weight `w`:
/// `w*y*softplus(-z) + (1-y)*softplus(z)`. With `w = 1` this is the plain form.
#[inline]
pub fn bce_term<T: Scalar>(z: T, y: T, pos_weight: T) -> T {
    if pos_weight == T::one() {
        z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
    } else {
        pos_weight * y * softplus(-z) + (T::one() - y) * softplus(z)
    }
}

/// Derivative of [`bce_term`] with respect to `z`.
#[inline]
pub fn bce_term_grad<T: Scalar>(z: T, y: T, pos_weight: T) -> T {
    let p = sigmoid_unchecked(z);
    if pos_weight == T::one() {
        p - y
    } else {
        (T::one() - y) * p - pos_weight * y * (T::one() - p)
    }
}

/// Mean binary cross-entropy over the batch.
pub fn bce_with_logits<T: Scalar>(batch: &LogitBatch<T>) -> T {
    bce_with_logits_weighted(batch, T::one())
}

pub fn bce_with_logits_weighted<T: Scalar>(batch: &LogitBatch<T>, pos_weight: T) -> T {
    let n = T::from_usize(batch.len()).expect("batch length fits the scalar");
    batch.z.iter().zip(&batch.y).map(|(&z, &y)| bce_term(z, y, pos_weight)).sum::<T>() / n
}

/// `(sigmoid(z_i) - y_i) / N` for each sample.
pub fn bce_with_logits_grad<T: Scalar>(batch: &LogitBatch<T>) -> Vec<T> {
    bce_with_logits_grad_weighted(batch, T::one())
}

pub fn bce_with_logits_grad_weighted<T: Scalar>(batch: &LogitBatch<T>, pos_weight: T) -> Vec<T> {
    let n = T::from_usize(batch.len()).expect("batch length fits the scalar");
    batch.z.iter().zip(&batch.y).map(|(&z, &y)| bce_term_grad(z, y, pos_weight) / n).collect()
}
