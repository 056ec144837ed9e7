use std::sync::OnceLock;

use super::{Spectrogram, HOP_SIZE, WINDOW_SIZE};
use crate::error::{Error, Result};

pub const N_MELS: usize = 128;
/// Additive floor inside the logarithm; silence maps to `ln(1e-6)`.
pub const LOG_FLOOR: f64 = 1e-6;

// Slaney mel scale: linear below 1 kHz, logarithmic above.
const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// Triangular mel filters with area (Slaney) normalization.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_fft: usize,
    pub sample_rate: u32,
    /// Filter edge frequencies, `n_mels + 2` values; filter `m` peaks at
    /// `edges[m + 1]`.
    pub edges: Vec<f64>,
    // sparse rows: (first bin, weights)
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
        let rows = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (hi - lo);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = bin_hz(k);
                        let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid));
                        (w > 0.0).then_some((k, w * norm))
                    })
                    .collect();
                match weights.first() {
                    Some(&(first, _)) => (first, weights.iter().map(|&(_, w)| w).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        MelFilterbank {
            n_mels,
            n_fft,
            sample_rate,
            edges,
            rows,
        }
    }

    /// The 128-band bank over 0–11025 Hz used for model inputs.
    pub fn standard() -> &'static MelFilterbank {
        static BANK: OnceLock<MelFilterbank> = OnceLock::new();
        BANK.get_or_init(|| {
            MelFilterbank::new(N_MELS, WINDOW_SIZE, super::SAMPLE_RATE, 0.0, 11025.0)
        })
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.edges[1..=self.n_mels]
    }

    /// Applies the bank to one spectrum frame.
    pub fn apply(&self, frame: &[f64], out: &mut [f64]) {
        for (slot, (first, w)) in out.iter_mut().zip(&self.rows) {
            *slot = w
                .iter()
                .zip(&frame[*first..])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
}

/// Log-compressed mel magnitudes, row-major `[frame][mel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// 128-band log-mel spectrogram of a 1024/512 STFT: `ln(mel + 1e-6)`.
pub fn mel_spectrogram(spec: &Spectrogram) -> Result<MelSpectrogram> {
    if spec.window_size != WINDOW_SIZE || spec.hop != HOP_SIZE {
        return Err(Error::shape(
            format!("{WINDOW_SIZE}/{HOP_SIZE} STFT"),
            format!("{}/{} STFT", spec.window_size, spec.hop),
        ));
    }
    Ok(log_mel(spec, MelFilterbank::standard()))
}

/// Applies any filterbank followed by `ln(x + 1e-6)`.
pub fn log_mel(spec: &Spectrogram, bank: &MelFilterbank) -> MelSpectrogram {
    let mut values = vec![0.0; spec.n_frames * bank.n_mels];
    for t in 0..spec.n_frames {
        let out = &mut values[t * bank.n_mels..(t + 1) * bank.n_mels];
        bank.apply(spec.frame(t), out);
        for v in out.iter_mut() {
            *v = (*v + LOG_FLOOR).ln();
        }
    }
    MelSpectrogram {
        values,
        n_frames: spec.n_frames,
        n_mels: bank.n_mels,
    }
}
