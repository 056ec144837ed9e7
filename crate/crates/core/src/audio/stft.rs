use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::AudioClip;
use crate::error::{Error, Result};

pub const WINDOW_SIZE: usize = 1024;
pub const HOP_SIZE: usize = 512;
pub const N_BINS: usize = WINDOW_SIZE / 2 + 1;

/// STFT magnitudes, row-major `[frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Vec<f64>,
    pub n_frames: usize,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let nb = self.n_bins();
        &self.magnitudes[t * nb..(t + 1) * nb]
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.window_size as f64
    }
}

/// Hann-window STFT with the model's 1024/512 configuration.
pub fn stft(clip: &AudioClip) -> Result<Spectrogram> {
    stft_with(clip, WINDOW_SIZE, HOP_SIZE)
}

/// Centered STFT with reflection padding of `window / 2` on both sides.
///
/// The frame count is `floor(len / hop)`: the trailing frame that a
/// centered transform would add is dropped, so a 3 s clip at 22050 Hz
/// yields exactly 129 frames.
pub fn stft_with(clip: &AudioClip, window: usize, hop: usize) -> Result<Spectrogram> {
    let n = clip.samples.len();
    if n < window {
        return Err(Error::TooShort {
            needed: window,
            got: n,
        });
    }
    let pad = window / 2;
    let x = &clip.samples;
    let sample = |i: isize| -> f64 {
        // reflect about the first and last samples (edge not repeated)
        let len = n as isize;
        let mut j = i;
        if j < 0 {
            j = -j;
        }
        if j >= len {
            j = 2 * (len - 1) - j;
        }
        x[j as usize]
    };
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window as f64).cos())
        .collect();
    let n_frames = n / hop;
    let n_bins = window / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut magnitudes = Vec::with_capacity(n_frames * n_bins);
    for t in 0..n_frames {
        let start = (t * hop) as isize - pad as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(sample(start + i as isize) * hann[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        magnitudes.extend(buf[..n_bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram {
        magnitudes,
        n_frames,
        window_size: window,
        hop,
        sample_rate: clip.sample_rate,
    })
}
