//! Onset-autocorrelation tempo estimation and dynamic-programming beat
//! tracking in the style of Ellis (2007).

use super::{log_mel, stft_with, AudioClip, MelFilterbank};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BeatGrid {
    pub tempo_bpm: f64,
    /// Beat instants in seconds, strictly increasing.
    pub beat_times: Vec<f64>,
}

impl BeatGrid {
    pub fn median_interval(&self) -> Option<f64> {
        if self.beat_times.len() < 2 {
            return None;
        }
        let mut d: Vec<f64> = self.beat_times.windows(2).map(|w| w[1] - w[0]).collect();
        d.sort_by(f64::total_cmp);
        Some(d[d.len() / 2])
    }
}

/// Onset analysis runs on a shorter window than the model front end so
/// that onset instants are not smeared by half of a 1024-sample window.
#[derive(Debug, Clone)]
pub struct TempoConfig {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub min_bpm: f64,
    pub max_bpm: f64,
    /// Centre of the log-normal tempo prior.
    pub prior_bpm: f64,
    /// Standard deviation of the prior in octaves.
    pub prior_octaves: f64,
    /// Penalty on deviations from the beat period in the DP.
    pub tightness: f64,
    pub min_seconds: f64,
}

impl Default for TempoConfig {
    fn default() -> Self {
        TempoConfig {
            window: 512,
            hop: 128,
            n_mels: 40,
            min_bpm: 60.0,
            max_bpm: 200.0,
            prior_bpm: 120.0,
            prior_octaves: 1.0,
            tightness: 100.0,
            min_seconds: 5.0,
        }
    }
}

/// Half-wave rectified first difference of log-mel energy, summed over
/// bands. Frame `t` is centred at `t * hop` samples; frame 0 is zero.
pub fn onset_envelope(clip: &AudioClip, cfg: &TempoConfig) -> Result<Vec<f64>> {
    let spec = stft_with(clip, cfg.window, cfg.hop)?;
    let bank = MelFilterbank::new(
        cfg.n_mels,
        cfg.window,
        clip.sample_rate,
        0.0,
        clip.sample_rate as f64 / 2.0,
    );
    let mel = log_mel(&spec, &bank);
    let mut env = vec![0.0; mel.n_frames];
    for t in 1..mel.n_frames {
        env[t] = mel
            .frame(t)
            .iter()
            .zip(mel.frame(t - 1))
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    Ok(env)
}

fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    (0..=max_lag)
        .map(|lag| {
            if lag >= c.len() {
                0.0
            } else {
                c[..c.len() - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum()
            }
        })
        .collect()
}

/// Period in (fractional) frames of the strongest prior-weighted
/// autocorrelation peak.
fn beat_period(env: &[f64], fps: f64, cfg: &TempoConfig) -> f64 {
    let lag_min = (60.0 * fps / cfg.max_bpm).floor().max(1.0) as usize;
    let lag_max = (60.0 * fps / cfg.min_bpm).ceil() as usize;
    let ac = autocorrelation(env, lag_max + 1);
    let weighted = |lag: usize| -> f64 {
        let bpm = 60.0 * fps / lag as f64;
        let z = (bpm / cfg.prior_bpm).log2() / cfg.prior_octaves;
        ac[lag] * (-0.5 * z * z).exp()
    };
    let best = (lag_min..=lag_max)
        .max_by(|&a, &b| weighted(a).total_cmp(&weighted(b)))
        .unwrap_or(lag_min);
    // parabolic refinement of the peak
    if best > lag_min && best < lag_max {
        let (a, b, c) = (weighted(best - 1), weighted(best), weighted(best + 1));
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            let delta = 0.5 * (a - c) / den;
            if delta.abs() < 1.0 {
                return best as f64 + delta;
            }
        }
    }
    best as f64
}

fn track_beats(env: &[f64], period: f64, tightness: f64) -> Vec<usize> {
    let n = env.len();
    let mean = env.iter().sum::<f64>() / n as f64;
    let std = (env.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let local: Vec<f64> = env.iter().map(|v| v / std.max(1e-12)).collect();

    let mut cum = vec![0.0; n];
    let mut back = vec![usize::MAX; n];
    let lo = (period / 2.0).round() as usize;
    let hi = (2.0 * period).round() as usize;
    for t in 0..n {
        let mut best = f64::NEG_INFINITY;
        let mut arg = usize::MAX;
        if t >= lo.max(1) {
            let start = t.saturating_sub(hi);
            for tau in start..=t - lo.max(1) {
                let dev = ((t - tau) as f64 / period).ln();
                let score = cum[tau] - tightness * dev * dev;
                if score > best {
                    best = score;
                    arg = tau;
                }
            }
        }
        if arg != usize::MAX {
            cum[t] = local[t] + best;
            back[t] = arg;
        } else {
            cum[t] = local[t];
        }
    }

    // last beat: final local maximum of the cumulative score above half
    // the median local-maximum height
    let maxima: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&t| cum[t] > cum[t - 1] && cum[t] >= cum[t + 1])
        .collect();
    if maxima.is_empty() {
        return Vec::new();
    }
    let mut heights: Vec<f64> = maxima.iter().map(|&t| cum[t]).collect();
    heights.sort_by(f64::total_cmp);
    let median = heights[heights.len() / 2];
    let last = maxima
        .iter()
        .rev()
        .copied()
        .find(|&t| cum[t] > 0.5 * median)
        .unwrap_or(*maxima.last().unwrap());

    let mut beats = vec![last];
    let mut t = last;
    while back[t] != usize::MAX {
        t = back[t];
        beats.push(t);
    }
    beats.reverse();

    // trim weak beats at either end (DP extrapolation into silence)
    let rms = (env.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let strength = |b: usize| -> f64 {
        let s = b.saturating_sub(2);
        let e = (b + 3).min(n);
        env[s..e].iter().cloned().fold(0.0, f64::max)
    };
    let first = beats.iter().position(|&b| strength(b) >= 0.5 * rms);
    let last = beats.iter().rposition(|&b| strength(b) >= 0.5 * rms);
    match (first, last) {
        (Some(f), Some(l)) if f <= l => beats[f..=l].to_vec(),
        _ => Vec::new(),
    }
}

/// Track-level tempo and beat instants.
///
/// The tempo reported is the least-squares slope of beat time against
/// beat index (indices inferred from the autocorrelation period, so a
/// skipped beat does not bias the fit).
pub fn estimate_tempo_and_beats(clip: &AudioClip) -> Result<BeatGrid> {
    estimate_tempo_with(clip, &TempoConfig::default())
}

pub fn estimate_tempo_with(clip: &AudioClip, cfg: &TempoConfig) -> Result<BeatGrid> {
    let needed = (cfg.min_seconds * clip.sample_rate as f64).ceil() as usize;
    if clip.len() < needed {
        return Err(Error::TooShort {
            needed,
            got: clip.len(),
        });
    }
    let env = onset_envelope(clip, cfg)?;
    let peak = env.iter().cloned().fold(0.0, f64::max);
    if peak <= 1e-9 {
        return Err(Error::NoOnsets);
    }
    let fps = clip.sample_rate as f64 / cfg.hop as f64;
    let period = beat_period(&env, fps, cfg);
    let frames = track_beats(&env, period, cfg.tightness);
    if frames.is_empty() {
        return Err(Error::NoOnsets);
    }
    let beat_times: Vec<f64> = frames.iter().map(|&f| f as f64 / fps).collect();

    let period_s = period / fps;
    let tempo_bpm = if beat_times.len() >= 3 {
        let t0 = beat_times[0];
        let idx: Vec<f64> = beat_times
            .iter()
            .map(|t| ((t - t0) / period_s).round())
            .collect();
        let n = idx.len() as f64;
        let mx = idx.iter().sum::<f64>() / n;
        let my = beat_times.iter().sum::<f64>() / n;
        let sxy: f64 = idx.iter().zip(&beat_times).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = idx.iter().map(|x| (x - mx).powi(2)).sum();
        if sxx > 0.0 && sxy > 0.0 {
            60.0 * sxx / sxy
        } else {
            60.0 / period_s
        }
    } else {
        60.0 / period_s
    };
    Ok(BeatGrid {
        tempo_bpm,
        beat_times,
    })
}
