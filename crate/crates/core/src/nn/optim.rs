use crate::dataset::OptimizerKind;
use crate::scalar::{lit, Scalar};

/// First-order optimizer over a list of parameter segments laid out back to
/// back in the gradient vector.
#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Adam { m: Vec<T>, v: Vec<T>, step: u64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { velocity: Vec<T>, momentum: f64 },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![T::zero(); n_params],
                v: vec![T::zero(); n_params],
                step: 0,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            OptimizerKind::Sgd => Optimizer::Sgd { velocity: vec![T::zero(); n_params], momentum },
        }
    }

    pub fn step(&mut self, segments: &mut [&mut [T]], grads: &[T], lr: f64, weight_decay: f64) {
        let total: usize = segments.iter().map(|s| s.len()).sum();
        assert_eq!(total, grads.len(), "gradient length must match parameter count");
        let wd = lit::<T>(weight_decay);
        match self {
            Optimizer::Adam { m, v, step, beta1, beta2, eps } => {
                *step += 1;
                let b1 = lit::<T>(*beta1);
                let b2 = lit::<T>(*beta2);
                let c1 = 1.0 - beta1.powi(*step as i32);
                let c2 = 1.0 - beta2.powi(*step as i32);
                let step_size = lit::<T>(lr * c2.sqrt() / c1);
                let eps_hat = lit::<T>(*eps * c2.sqrt());
                let mut i = 0;
                for seg in segments.iter_mut() {
                    for p in seg.iter_mut() {
                        let g = grads[i] + wd * *p;
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        *p -= step_size * m[i] / (v[i].sqrt() + eps_hat);
                        i += 1;
                    }
                }
            }
            Optimizer::Sgd { velocity, momentum } => {
                let mu = lit::<T>(*momentum);
                let lr = lit::<T>(lr);
                let mut i = 0;
                for seg in segments.iter_mut() {
                    for p in seg.iter_mut() {
                        let g = grads[i] + wd * *p;
                        velocity[i] = mu * velocity[i] + g;
                        *p -= lr * velocity[i];
                        i += 1;
                    }
                }
            }
        }
    }
}
