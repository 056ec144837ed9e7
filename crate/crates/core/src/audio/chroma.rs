use super::Spectrogram;

/// Lowest frequency folded into the chroma; lower bins are too coarse to
/// resolve semitones.
pub const CHROMA_FMIN: f64 = 55.0;

/// Pitch-class energy per frame, row-major `[frame][pc]` with pc 0 = C.
/// Each frame is scaled so its largest pitch class is 1 (silent frames
/// stay all-zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Chromagram {
    pub values: Vec<f64>,
    pub n_frames: usize,
}

impl Chromagram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * 12..(t + 1) * 12]
    }

    /// Mean over frames.
    pub fn mean(&self) -> [f64; 12] {
        let mut acc = [0.0; 12];
        for t in 0..self.n_frames {
            for (a, v) in acc.iter_mut().zip(self.frame(t)) {
                *a += v;
            }
        }
        if self.n_frames > 0 {
            for a in &mut acc {
                *a /= self.n_frames as f64;
            }
        }
        acc
    }
}

/// Pitch class (0 = C) nearest to a frequency, with A4 = 440 Hz.
pub fn pitch_class(hz: f64) -> usize {
    let semis = (12.0 * (hz / 440.0).log2()).round() as i64 + 9;
    semis.rem_euclid(12) as usize
}

/// Folds squared STFT magnitudes into 12 pitch classes.
pub fn chromagram(spec: &Spectrogram) -> Chromagram {
    let nb = spec.n_bins();
    let classes: Vec<Option<usize>> = (0..nb)
        .map(|k| {
            let f = spec.bin_frequency(k);
            (f >= CHROMA_FMIN).then(|| pitch_class(f))
        })
        .collect();
    let mut values = vec![0.0; spec.n_frames * 12];
    for t in 0..spec.n_frames {
        let row = &mut values[t * 12..(t + 1) * 12];
        for (m, pc) in spec.frame(t).iter().zip(&classes) {
            if let Some(pc) = pc {
                row[*pc] += m * m;
            }
        }
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v /= max);
        }
    }
    Chromagram {
        values,
        n_frames: spec.n_frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{stft, AudioClip, SAMPLE_RATE, SEGMENT_SAMPLES};
    use std::f64::consts::PI;

    fn tones(freqs: &[f64]) -> AudioClip {
        let sr = SAMPLE_RATE as f64;
        AudioClip::new(
            (0..SEGMENT_SAMPLES)
                .map(|i| {
                    freqs
                        .iter()
                        .map(|f| 0.3 * (2.0 * PI * f * i as f64 / sr).cos())
                        .sum()
                })
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn pitch_class_reference() {
        assert_eq!(pitch_class(440.0), 9);
        assert_eq!(pitch_class(261.63), 0);
        assert_eq!(pitch_class(880.0), 9);
        assert_eq!(pitch_class(55.0), 9);
    }

    #[test]
    fn a440_dominates() {
        let c = chromagram(&stft(&tones(&[440.0])).unwrap());
        for t in 0..c.n_frames {
            let f = c.frame(t);
            let argmax = (0..12).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            assert_eq!(argmax, 9);
        }
    }

    #[test]
    fn silence_is_zero() {
        let c = chromagram(&stft(&AudioClip::silence(SEGMENT_SAMPLES, SAMPLE_RATE)).unwrap());
        assert!(c.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn c_major_triad_top_three() {
        let freqs = [261.6256, 329.6276, 391.9954];
        let spec = stft(&tones(&freqs)).unwrap();
        // Oracle: raw (unnormalized) energy folded by brute force over bins.
        let mut oracle = [0.0f64; 12];
        for t in 0..spec.n_frames {
            for (k, m) in spec.frame(t).iter().enumerate() {
                let f = k as f64 * 22050.0 / 1024.0;
                if f >= 55.0 {
                    let midi = 69.0 + 12.0 * (f / 440.0).log2();
                    oracle[(midi.round() as i64).rem_euclid(12) as usize] += m * m;
                }
            }
        }
        let top3 = |v: &[f64; 12]| {
            let mut idx: Vec<usize> = (0..12).collect();
            idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            let mut t = idx[..3].to_vec();
            t.sort();
            t
        };
        assert_eq!(top3(&oracle), vec![0, 4, 7]);
        assert_eq!(top3(&chromagram(&spec).mean()), vec![0, 4, 7]);
    }
}
