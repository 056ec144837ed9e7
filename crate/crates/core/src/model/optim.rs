//! Adam.

use serde::{Deserialize, Serialize};

use super::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment buffers for one list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamMoments<T> {
    pub fn for_shapes(lens: &[usize]) -> Self {
        AdamMoments {
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn congruent_with(&self, lens: &[usize]) -> bool {
        self.m.len() == lens.len()
            && self.v.len() == lens.len()
            && self.m.iter().zip(lens).all(|(t, &n)| t.len() == n)
            && self.v.iter().zip(lens).all(|(t, &n)| t.len() == n)
    }
}

/// One bias-corrected update; `step` counts from 1.
pub fn adam_step<T: Real>(
    config: &AdamConfig,
    step: u64,
    moments: &mut AdamMoments<T>,
    params: Vec<&mut Vec<T>>,
    grads: Vec<&[T]>,
) {
    let b1 = T::of(config.beta1);
    let b2 = T::of(config.beta2);
    let c1 = T::of(1.0 - config.beta1);
    let c2 = T::of(1.0 - config.beta2);
    let t = step as i32;
    let lr_t = T::of(
        config.learning_rate * (1.0 - config.beta2.powi(t)).sqrt() / (1.0 - config.beta1.powi(t)),
    );
    let eps = T::of(config.epsilon);
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(&mut moments.m)
        .zip(&mut moments.v)
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + c1 * g[i];
            v[i] = b2 * v[i] + c2 * g[i] * g[i];
            p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
        }
    }
}
