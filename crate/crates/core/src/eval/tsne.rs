use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 100;
const MOMENTUM_SWITCH: usize = 250;
const INIT_STD: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    /// KL(P‖Q) of the initial layout followed by one value per iteration.
    pub kl: Vec<f64>,
}

fn sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row `i` of the conditional affinities with the Gaussian precision found
/// by bisection so the row's entropy is `ln(perplexity)`.
fn conditional_row(d: &[f64], i: usize, target: f64, out: &mut [f64]) {
    let n = out.len();
    let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
    // shift by the nearest neighbour's distance for numerical range
    let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            out[j] = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
            sum += out[j];
            weighted += out[j] * (d[j] - dmin);
        }
        let h = sum.ln() + beta * weighted / sum;
        out.iter_mut().for_each(|p| *p /= sum);
        let diff = h - target;
        if diff.abs() < 1e-10 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
}

fn joint_affinities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let d = sq_distances(x);
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        conditional_row(&d[i * n..(i + 1) * n], i, perplexity.ln(), &mut cond[i * n..(i + 1) * n]);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    p
}

/// Student-t kernel `1 / (1 + ‖yi − yj‖²)` and its sum over i ≠ j.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut w = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = v;
            w[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (w, z)
}

fn kl_divergence(p: &[f64], w: &[f64], z: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                let q = (w[i * n + j] / z).max(1e-300);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE to two dimensions.
pub fn project_2d(vectors: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult> {
    let n = vectors.len();
    let max = (n as f64 - 1.0) / 3.0;
    if max <= 5.0 {
        return Err(Error::TooFewPoints(format!(
            "{n} points; perplexity 5 needs at least 17"
        )));
    }
    if !(config.perplexity >= 5.0) || !(config.perplexity < max) {
        return Err(Error::TooFewPoints(format!(
            "{n} points allow perplexity in [5, {max:.2}), got {}",
            config.perplexity
        )));
    }
    if vectors.iter().any(|v| v.len() != vectors[0].len()) {
        return Err(Error::shape(format!("{}-d vectors", vectors[0].len()), "ragged input"));
    }
    let p = joint_affinities(vectors, config.perplexity);
    let mut rng = seed::rng(seed::derive_seed(config.seed, &["tsne"]));
    let normal = Normal::new(0.0, INIT_STD).expect("valid deviation");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let (w, z) = kernel(&y);
    let mut kl = vec![kl_divergence(&p, &w, z, n)];
    for it in 0..config.iterations {
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < MOMENTUM_SWITCH { 0.5 } else { 0.8 };
        let (w, z) = kernel(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let wij = w[i * n + j];
                let f = 4.0 * (exaggeration * p[i * n + j] - wij / z) * wij;
                g[0] += f * (y[i][0] - y[j][0]);
                g[1] += f * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                let same_sign = (g[c] > 0.0) == (velocity[i][c] > 0.0);
                gains[i][c] = if same_sign { gains[i][c] * 0.8 } else { gains[i][c] + 0.2 };
                gains[i][c] = gains[i][c].max(MIN_GAIN);
                velocity[i][c] = momentum * velocity[i][c] - config.learning_rate * gains[i][c] * g[c];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0], m[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
        let (w, z) = kernel(&y);
        kl.push(kl_divergence(&p, &w, z, n));
    }
    Ok(TsneResult { points: y, kl })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_hits_the_perplexity() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin() * 3.0, i as f64 * 0.1]).collect();
        let n = x.len();
        let d = sq_distances(&x);
        let mut row = vec![0.0; n];
        conditional_row(&d[..n], 0, 10f64.ln(), &mut row);
        let h: f64 = -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        assert!((h.exp() - 10.0).abs() < 1e-6, "{}", h.exp());
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_bounds() {
        let x = vec![vec![0.0]; 10];
        let cfg = TsneConfig::default();
        assert!(matches!(project_2d(&x, &cfg), Err(Error::TooFewPoints(_))));
    }
}
