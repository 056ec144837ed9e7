//! MFCC GMM-UBM baseline: a diagonal-covariance universal background
//! model trained by EM and specialised to each singer by mean-only MAP
//! adaptation.

mod mfcc;

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

pub use mfcc::{mfcc, voiced_mfcc, MfccSequence, N_MFCC, N_MFCC_FILTERS};

use crate::error::{Error, Result};
use crate::model::checkpoint::{read_all, write_atomically, Container, Cursor};
use crate::seed;

pub const VARIANCE_FLOOR: f64 = 1e-3;
/// EM stops once the average log-likelihood improves by less than this.
pub const EM_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_RELEVANCE: f64 = 16.0;
pub const MAGIC: [u8; 4] = *b"GUBM";
pub const VERSION: u32 = 1;

// frames per parallel E-step chunk; partial sums are reduced in chunk order
const CHUNK: usize = 512;

/// Diagonal GMM, `means` and `variances` row-major `[component][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingerGmm {
    pub singer_id: String,
    pub params: GmmParams,
}

impl GmmParams {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    fn precompute(&self) -> Scorer {
        let d = self.dim;
        let norm = (0..self.n_components())
            .map(|k| {
                let lw = self.weights[k].ln();
                lw - 0.5 * self.variance(k).iter().map(|v| (2.0 * std::f64::consts::PI * v).ln()).sum::<f64>()
            })
            .collect();
        let inv = self.variances.iter().map(|v| 1.0 / v).collect();
        Scorer {
            dim: d,
            norm,
            inv,
            means: self.means.clone(),
        }
    }
}

/// Per-component log weight + Gaussian normaliser and inverse variances.
struct Scorer {
    dim: usize,
    norm: Vec<f64>,
    inv: Vec<f64>,
    means: Vec<f64>,
}

impl Scorer {
    /// Joint log densities `log w_k N(x; μ_k, σ_k²)` into `out`; returns
    /// their log-sum-exp.
    fn joint(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim;
        for (k, o) in out.iter_mut().enumerate() {
            let m = &self.means[k * d..(k + 1) * d];
            let iv = &self.inv[k * d..(k + 1) * d];
            let q: f64 = x.iter().zip(m).zip(iv).map(|((x, m), iv)| (x - m) * (x - m) * iv).sum();
            *o = self.norm[k] - 0.5 * q;
        }
        log_sum_exp(out)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Zeroth, first and second order posterior statistics.
struct Stats {
    n: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    log_lik: f64,
}

impl Stats {
    fn zeros(k: usize, d: usize) -> Self {
        Stats {
            n: vec![0.0; k],
            sx: vec![0.0; k * d],
            sxx: vec![0.0; k * d],
            log_lik: 0.0,
        }
    }

    fn add(mut self, o: Stats) -> Stats {
        let add = |a: &mut Vec<f64>, b: &[f64]| a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        add(&mut self.n, &o.n);
        add(&mut self.sx, &o.sx);
        add(&mut self.sxx, &o.sxx);
        self.log_lik += o.log_lik;
        self
    }
}

fn e_step(params: &GmmParams, frames: &MfccSequence, second_order: bool) -> Stats {
    let (k, d) = (params.n_components(), params.dim);
    let scorer = params.precompute();
    let partial: Vec<Stats> = frames
        .values
        .par_chunks(CHUNK * d)
        .map(|chunk| {
            let mut s = Stats::zeros(k, d);
            let mut post = vec![0.0; k];
            for x in chunk.chunks_exact(d) {
                let l = scorer.joint(x, &mut post);
                s.log_lik += l;
                for (j, p) in post.iter_mut().enumerate() {
                    let g = (*p - l).exp();
                    if g == 0.0 {
                        continue;
                    }
                    s.n[j] += g;
                    for (i, &xi) in x.iter().enumerate() {
                        s.sx[j * d + i] += g * xi;
                        if second_order {
                            s.sxx[j * d + i] += g * xi * xi;
                        }
                    }
                }
            }
            s
        })
        .collect();
    partial.into_iter().fold(Stats::zeros(k, d), Stats::add)
}

fn m_step(params: &mut GmmParams, s: &Stats, total: f64) {
    let d = params.dim;
    for j in 0..params.n_components() {
        params.weights[j] = s.n[j] / total;
        if s.n[j] <= 0.0 {
            continue; // an empty component keeps its shape with zero weight
        }
        for i in 0..d {
            let m = s.sx[j * d + i] / s.n[j];
            let v = s.sxx[j * d + i] / s.n[j] - m * m;
            params.means[j * d + i] = m;
            params.variances[j * d + i] = v.max(VARIANCE_FLOOR);
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: centres, then one hard assignment for weights and
/// (floored) variances.
fn kmeans_pp(frames: &MfccSequence, k: usize, rng: &mut seed::Rng) -> GmmParams {
    let d = frames.dim;
    let n = frames.n_frames;
    let mut centres: Vec<usize> = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = frames.frames().map(|x| dist2(x, frames.frame(centres[0]))).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centres.push(next);
        let c = frames.frame(next);
        for (i, x) in frames.frames().enumerate() {
            nearest[i] = nearest[i].min(dist2(x, c));
        }
    }
    let means: Vec<f64> = centres.iter().flat_map(|&c| frames.frame(c).to_vec()).collect();
    let mut s = Stats::zeros(k, d);
    for x in frames.frames() {
        let j = (0..k)
            .min_by(|&a, &b| dist2(x, &means[a * d..(a + 1) * d]).total_cmp(&dist2(x, &means[b * d..(b + 1) * d])))
            .expect("k ≥ 1");
        s.n[j] += 1.0;
        for (i, &xi) in x.iter().enumerate() {
            s.sx[j * d + i] += xi;
            s.sxx[j * d + i] += xi * xi;
        }
    }
    let mut params = GmmParams {
        weights: vec![0.0; k],
        means,
        variances: vec![1.0; k * d],
        dim: d,
    };
    m_step(&mut params, &s, n as f64);
    params
}

/// Result of [`train_ubm`]: the model and the average log-likelihood of
/// the pool before each M-step (the last entry is the final model's).
#[derive(Debug, Clone)]
pub struct UbmFit {
    pub params: GmmParams,
    pub log_likelihoods: Vec<f64>,
}

pub fn train_ubm(pool: &MfccSequence, k: usize, max_iters: usize, seed: u64) -> Result<UbmFit> {
    if k == 0 {
        return Err(Error::Config("a GMM needs at least one component".into()));
    }
    if k > pool.n_frames {
        return Err(Error::Config(format!(
            "{k} components need at least as many frames, got {}",
            pool.n_frames
        )));
    }
    let mut rng = seed::rng(seed::derive_seed(seed, &["ubm"]));
    let mut params = kmeans_pp(pool, k, &mut rng);
    let total = pool.n_frames as f64;
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..max_iters {
        let s = e_step(&params, pool, true);
        let ll = s.log_lik / total;
        let converged = history.last().is_some_and(|&prev| ll - prev < EM_TOLERANCE);
        history.push(ll);
        if converged {
            break;
        }
        m_step(&mut params, &s, total);
    }
    if history.len() == max_iters || history.is_empty() {
        history.push(avg_log_likelihood(&params, pool)?);
    }
    log::info!("UBM k={k}: {} EM passes, log-likelihood {:.4}", history.len() - 1, history.last().unwrap());
    Ok(UbmFit {
        params,
        log_likelihoods: history,
    })
}

/// Mean-only MAP adaptation; weights and variances are the UBM's.
pub fn map_adapt(ubm: &GmmParams, frames: &MfccSequence, relevance: f64, singer_id: &str) -> Result<SingerGmm> {
    if frames.is_empty() {
        return Err(Error::Empty("adaptation frames"));
    }
    if !(relevance >= 0.0) {
        return Err(Error::Config("relevance factor must be non-negative".into()));
    }
    let d = ubm.dim;
    let s = e_step(ubm, frames, false);
    let mut params = ubm.clone();
    for j in 0..ubm.n_components() {
        let n = s.n[j];
        if n <= 0.0 {
            continue;
        }
        let alpha = n / (n + relevance);
        for i in 0..d {
            let data = s.sx[j * d + i] / n;
            params.means[j * d + i] = alpha * data + (1.0 - alpha) * ubm.means[j * d + i];
        }
    }
    Ok(SingerGmm {
        singer_id: singer_id.to_string(),
        params,
    })
}

/// Mean over frames of `log Σ_k w_k N(x; μ_k, σ_k²)`.
pub fn avg_log_likelihood(gmm: &GmmParams, frames: &MfccSequence) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Empty("scoring frames"));
    }
    if frames.dim != gmm.dim {
        return Err(Error::shape(format!("{}-d frames", gmm.dim), format!("{}-d", frames.dim)));
    }
    let scorer = gmm.precompute();
    let k = gmm.n_components();
    let sums: Vec<f64> = frames
        .values
        .par_chunks(CHUNK * gmm.dim)
        .map(|chunk| {
            let mut buf = vec![0.0; k];
            chunk.chunks_exact(gmm.dim).map(|x| scorer.joint(x, &mut buf)).sum::<f64>()
        })
        .collect();
    Ok(sums.iter().sum::<f64>() / frames.n_frames as f64)
}

/// Singers by descending average log-likelihood, ties by singer id.
pub fn gmm_identify(query: &MfccSequence, models: &[SingerGmm]) -> Result<Vec<(String, f64)>> {
    if models.is_empty() {
        return Err(Error::Empty("singer models"));
    }
    let mut scored: Vec<(String, f64)> = models
        .iter()
        .map(|m| Ok((m.singer_id.clone(), avg_log_likelihood(&m.params, query)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

/// The two background models of the baseline, one per audio domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmBaseline {
    pub mono: GmmParams,
    pub mixed: GmmParams,
    pub relevance: f64,
}

fn push_f64s(c: &mut Container, v: &[f64]) {
    c.push_words(v.iter().flat_map(|x| {
        let b = x.to_bits();
        [b as u32, (b >> 32) as u32]
    }).collect());
}

fn read_f64s(c: &mut Cursor, n: usize) -> Result<Vec<f64>> {
    Ok(c.words(Some(2 * n))?
        .chunks_exact(2)
        .map(|w| f64::from_bits(w[0] as u64 | (w[1] as u64) << 32))
        .collect())
}

impl GmmBaseline {
    pub fn ubm(&self, domain: crate::model::Domain) -> &GmmParams {
        match domain {
            crate::model::Domain::Monophonic => &self.mono,
            crate::model::Domain::Mixed => &self.mixed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut c = Container::default();
        push_f64s(&mut c, &[self.relevance]);
        for g in [&self.mono, &self.mixed] {
            c.push_words(vec![g.n_components() as u32, g.dim as u32]);
            push_f64s(&mut c, &g.weights);
            push_f64s(&mut c, &g.means);
            push_f64s(&mut c, &g.variances);
        }
        c.to_bytes(MAGIC, VERSION, 0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, c) = Container::from_bytes(bytes, MAGIC, VERSION)?;
        let mut cur = Cursor::new(c);
        let relevance = read_f64s(&mut cur, 1)?[0];
        let mut read = || -> Result<GmmParams> {
            let shape = cur.words(Some(2))?;
            let (k, d) = (shape[0] as usize, shape[1] as usize);
            if k == 0 || d == 0 {
                return Err(Error::Truncated(format!("degenerate GMM shape {k}×{d}")));
            }
            Ok(GmmParams {
                weights: read_f64s(&mut cur, k)?,
                means: read_f64s(&mut cur, k * d)?,
                variances: read_f64s(&mut cur, k * d)?,
                dim: d,
            })
        };
        let mono = read()?;
        let mixed = read()?;
        cur.finish()?;
        Ok(GmmBaseline { mono, mixed, relevance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomically(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_all(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[[f64; 2]]) -> MfccSequence {
        MfccSequence::new(rows.iter().flatten().copied().collect(), 2)
    }

    #[test]
    fn single_component_closed_form() {
        let data = seq(&[[1.0, 0.0], [3.0, 0.0], [2.0, 0.01], [6.0, -0.01]]);
        let fit = train_ubm(&data, 1, 20, 0).unwrap();
        let g = fit.params;
        assert_eq!(g.weights, vec![1.0]);
        assert!((g.means[0] - 3.0).abs() < 1e-12);
        assert!((g.variances[0] - 3.5).abs() < 1e-12);
        // second dimension's variance 5e-5 sits below the floor
        assert_eq!(g.variances[1], VARIANCE_FLOOR);
        // density at the mean
        let at = seq(&[[3.0, 0.0]]);
        let want = -0.5 * (2.0 * std::f64::consts::PI * g.variances[0]).ln()
            - 0.5 * (2.0 * std::f64::consts::PI * g.variances[1]).ln();
        let got = avg_log_likelihood(&g, &at).unwrap();
        assert!((got - want - (-0.5 * g.means[1] * g.means[1] / g.variances[1])).abs() < 1e-12);
    }

    #[test]
    fn too_many_components() {
        let data = seq(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(train_ubm(&data, 3, 10, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = seq(&[[0.0, 1.0], [1.0, 2.0], [5.0, 5.0], [6.0, 4.0], [0.5, 1.5]]);
        let g = train_ubm(&data, 2, 10, 1).unwrap().params;
        let b = GmmBaseline {
            mono: g.clone(),
            mixed: g,
            relevance: 16.0,
        };
        assert_eq!(GmmBaseline::from_bytes(&b.to_bytes()).unwrap(), b);
        let mut bytes = b.to_bytes();
        bytes[0] = b'M';
        assert!(matches!(GmmBaseline::from_bytes(&bytes), Err(Error::BadMagic { .. })));
        assert!(GmmBaseline::from_bytes(&b.to_bytes()[..40]).is_err());
    }
}
