//! Deterministic signal-processing kernels.
//!
//! Every function here is a pure function of its inputs. Analysis runs at
//! [`SAMPLE_RATE`]; [`load_wav`] resamples anything else on the way in.

mod chroma;
mod key;
mod mel;
mod stft;
mod tempo;
mod vad;
mod wav;

pub use chroma::{chromagram, Chromagram};
pub use key::{estimate_key, key_from_profile, KeyEstimate, Mode, KRUMHANSL_MAJOR, KRUMHANSL_MINOR};
pub use mel::{hz_to_mel, log_mel, mel_spectrogram, mel_to_hz, MelFilterbank, MelSpectrogram};
pub use stft::{stft, stft_with, Spectrogram, HOP_SIZE, N_BINS, WINDOW_SIZE};
pub use tempo::{estimate_tempo_and_beats, onset_envelope, BeatGrid, TempoConfig};
pub use vad::{detect_voiced_frames, segment_voiced_ratio, VoiceActivity, VAD_THRESHOLD};
pub use wav::{load_wav, resample_linear, write_wav};

use crate::error::{Error, Result};

/// Analysis sample rate in Hz.
pub const SAMPLE_RATE: u32 = 22050;

/// Length of a model input segment in seconds.
pub const SEGMENT_SECONDS: f64 = 3.0;

/// Number of samples in one 3-second segment at [`SAMPLE_RATE`].
pub const SEGMENT_SAMPLES: usize = 66150;

/// A mono sample buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Config(format!("sample {i} is not finite")));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        AudioClip {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// Root-mean-square amplitude.
pub fn rms(clip: &AudioClip) -> Result<f64> {
    rms_of(&clip.samples).ok_or(Error::Empty("rms of an empty clip"))
}

pub(crate) fn rms_of(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let energy: f64 = samples.iter().map(|s| s * s).sum();
    Some((energy / samples.len() as f64).sqrt())
}

/// Sample-exact slice of `duration` seconds starting at `start`.
///
/// Boundaries are rounded to the nearest sample, so a 3-second slice at
/// 22050 Hz is always 66150 samples regardless of the start offset.
pub fn extract_segment(clip: &AudioClip, start: f64, duration: f64) -> Result<AudioClip> {
    let sr = clip.sample_rate as f64;
    let out_of_range = || Error::OutOfRange {
        start,
        end: start + duration,
        len: clip.duration(),
    };
    if !(start >= 0.0) || !(duration >= 0.0) {
        return Err(out_of_range());
    }
    let first = (start * sr).round() as usize;
    let count = (duration * sr).round() as usize;
    let end = first.checked_add(count).ok_or_else(out_of_range)?;
    if end > clip.samples.len() {
        return Err(out_of_range());
    }
    Ok(AudioClip {
        samples: clip.samples[first..end].to_vec(),
        sample_rate: clip.sample_rate,
    })
}
