use std::sync::OnceLock;

use crate::audio::{stft, AudioClip, MelFilterbank, VoiceActivity, SAMPLE_RATE, WINDOW_SIZE};
use crate::error::Result;

pub const N_MFCC_FILTERS: usize = 40;
/// Coefficients 1..=13; c0 (overall level) is dropped.
pub const N_MFCC: usize = 13;
const POWER_FLOOR: f64 = 1e-10;

/// Row-major `[frame][coefficient]` cepstra.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccSequence {
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub dim: usize,
}

impl MfccSequence {
    pub fn new(values: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && values.len() % dim == 0, "ragged MFCC matrix");
        MfccSequence {
            n_frames: values.len() / dim,
            values,
            dim,
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn is_empty(&self) -> bool {
        self.n_frames == 0
    }

    /// Keeps frames whose flag is set; frames past the mask's end are kept.
    pub fn select(&self, mask: &[bool]) -> MfccSequence {
        let values = self
            .frames()
            .enumerate()
            .filter(|(t, _)| mask.get(*t).copied().unwrap_or(true))
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        MfccSequence::new(values, self.dim)
    }

    /// Stacks sequences of equal dimension.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a MfccSequence>) -> MfccSequence {
        let mut values = Vec::new();
        let mut dim = N_MFCC;
        for p in parts {
            dim = p.dim;
            values.extend_from_slice(&p.values);
        }
        MfccSequence::new(values, dim)
    }
}

fn filterbank() -> &'static MelFilterbank {
    static BANK: OnceLock<MelFilterbank> = OnceLock::new();
    BANK.get_or_init(|| MelFilterbank::new(N_MFCC_FILTERS, WINDOW_SIZE, SAMPLE_RATE, 0.0, SAMPLE_RATE as f64 / 2.0))
}

/// Orthonormal DCT-II basis rows `1..=N_MFCC` over `n` inputs.
fn dct_rows(n: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(N_MFCC * n);
    let scale = (2.0 / n as f64).sqrt();
    for k in 1..=N_MFCC {
        for i in 0..n {
            rows.push(scale * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos());
        }
    }
    rows
}

/// 13 MFCCs per 1024/512 STFT frame: 40 mel power bands, natural log,
/// orthonormal DCT-II, coefficients 1–13.
pub fn mfcc(clip: &AudioClip) -> Result<MfccSequence> {
    let spec = stft(clip)?;
    let bank = filterbank();
    let dct = dct_rows(N_MFCC_FILTERS);
    let mut power = vec![0.0; spec.n_bins()];
    let mut bands = vec![0.0; N_MFCC_FILTERS];
    let mut values = Vec::with_capacity(spec.n_frames * N_MFCC);
    for t in 0..spec.n_frames {
        power.iter_mut().zip(spec.frame(t)).for_each(|(p, m)| *p = m * m);
        bank.apply(&power, &mut bands);
        bands.iter_mut().for_each(|b| *b = (*b + POWER_FLOOR).ln());
        values.extend(dct.chunks_exact(N_MFCC_FILTERS).map(|row| {
            row.iter().zip(&bands).map(|(a, b)| a * b).sum::<f64>()
        }));
    }
    Ok(MfccSequence::new(values, N_MFCC))
}

/// MFCCs of the frames `activity` marks voiced (all frames when none
/// are). The STFT is centred, so its frame `t` lines up with
/// voice-activity frame `t − 1`.
pub fn voiced_mfcc(clip: &AudioClip, activity: &VoiceActivity) -> Result<MfccSequence> {
    let m = mfcc(clip)?;
    let a = &activity.frame_mask;
    let mask: Vec<bool> = (0..m.n_frames)
        .map(|t| a.get(t.saturating_sub(1)).or(a.last()).copied().unwrap_or(true))
        .collect();
    let voiced = m.select(&mask);
    Ok(if voiced.is_empty() { m } else { voiced })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal() {
        let n = N_MFCC_FILTERS;
        let rows = dct_rows(n);
        for a in 0..N_MFCC {
            for b in 0..N_MFCC {
                let dot: f64 = (0..n).map(|i| rows[a * n + i] * rows[b * n + i]).sum();
                assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-12);
            }
            // orthogonal to the constant vector, i.e. to c0
            assert!(rows[a * n..(a + 1) * n].iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn silence_gives_constant_frames() {
        let m = mfcc(&AudioClip::silence(22050, SAMPLE_RATE)).unwrap();
        assert_eq!(m.n_frames, stft(&AudioClip::silence(22050, SAMPLE_RATE)).unwrap().n_frames);
        for f in m.frames() {
            assert_eq!(f, m.frame(0));
        }
    }
}
