use super::{rms_of, AudioClip, HOP_SIZE, WINDOW_SIZE};

/// Relative threshold: a frame is voiced when its RMS exceeds this
/// fraction of the clip's 95th-percentile frame RMS.
pub const VAD_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct VoiceActivity {
    /// One flag per 1024-sample frame at hop 512 (frame `i` starts at
    /// sample `512 * i`).
    pub frame_mask: Vec<bool>,
    pub voiced_ratio: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Energy-based singing-voice detection.
pub fn detect_voiced_frames(clip: &AudioClip) -> VoiceActivity {
    detect_voiced_with(clip, VAD_THRESHOLD)
}

pub fn detect_voiced_with(clip: &AudioClip, threshold: f64) -> VoiceActivity {
    let n = clip.samples.len();
    if n == 0 {
        return VoiceActivity {
            frame_mask: Vec::new(),
            voiced_ratio: 0.0,
        };
    }
    let n_frames = if n >= WINDOW_SIZE {
        1 + (n - WINDOW_SIZE) / HOP_SIZE
    } else {
        1
    };
    let energies: Vec<f64> = (0..n_frames)
        .map(|i| {
            let s = i * HOP_SIZE;
            let e = (s + WINDOW_SIZE).min(n);
            rms_of(&clip.samples[s..e]).unwrap_or(0.0)
        })
        .collect();
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = threshold * percentile(&sorted, 0.95);
    let frame_mask: Vec<bool> = energies.iter().map(|&e| e > cut).collect();
    let voiced = frame_mask.iter().filter(|&&v| v).count();
    VoiceActivity {
        voiced_ratio: voiced as f64 / n_frames as f64,
        frame_mask,
    }
}

/// Voiced fraction of the frames lying entirely inside
/// `[start, start + len)` samples of the analysed clip.
pub fn segment_voiced_ratio(activity: &VoiceActivity, start: usize, len: usize) -> f64 {
    let first = start.div_ceil(HOP_SIZE);
    let end = start + len;
    let frames: Vec<bool> = (first..activity.frame_mask.len())
        .take_while(|i| i * HOP_SIZE + WINDOW_SIZE <= end)
        .map(|i| activity.frame_mask[i])
        .collect();
    if frames.is_empty() {
        return 0.0;
    }
    frames.iter().filter(|&&v| v).count() as f64 / frames.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use std::f64::consts::PI;

    fn tone(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * 330.0 * i as f64 / SAMPLE_RATE as f64).sin())
            .collect()
    }

    #[test]
    fn silence_and_full_tone() {
        let sil = detect_voiced_frames(&AudioClip::silence(66150, SAMPLE_RATE));
        assert_eq!(sil.voiced_ratio, 0.0);
        let full = detect_voiced_frames(&AudioClip::new(tone(66150), SAMPLE_RATE).unwrap());
        assert_eq!(full.voiced_ratio, 1.0);
    }

    #[test]
    fn tone_gap_tone() {
        let sr = SAMPLE_RATE as usize;
        let mut s = tone(sr);
        s.extend(vec![0.0; sr]);
        s.extend(tone(sr));
        let clip = AudioClip::new(s, SAMPLE_RATE).unwrap();
        let act = detect_voiced_frames(&clip);
        // oracle: frames touching a tone region are voiced
        let n = act.frame_mask.len();
        let expected = (0..n)
            .filter(|&i| {
                let (a, b) = (i * HOP_SIZE, i * HOP_SIZE + WINDOW_SIZE);
                a < sr || b > 2 * sr
            })
            .count();
        let got = act.frame_mask.iter().filter(|&&v| v).count();
        assert!((got as i64 - expected as i64).abs() <= 1, "{got} vs {expected}");
        assert!((act.voiced_ratio - 2.0 / 3.0).abs() <= 1.0 / n as f64 + 0.02);
    }

    #[test]
    fn segment_ratio_uses_inner_frames() {
        let act = VoiceActivity {
            frame_mask: vec![true, true, false, false, true, true],
            voiced_ratio: 4.0 / 6.0,
        };
        // frames 0..=4 fit in [0, 512*4+1024)
        assert!((segment_voiced_ratio(&act, 0, 512 * 4 + 1024) - 3.0 / 5.0).abs() < 1e-12);
        assert_eq!(segment_voiced_ratio(&act, 512 * 4, 1024), 1.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn gain_invariant(
            samples in proptest::collection::vec(-1.0f64..1.0, 1024..6000),
            gain in 0.01f64..50.0,
        ) {
            let clip = AudioClip::new(samples, SAMPLE_RATE).unwrap();
            let a = detect_voiced_frames(&clip);
            let b = detect_voiced_frames(&clip.scaled(gain));
            // tolerate flips only for frames sitting on the threshold
            let mut sorted: Vec<f64> = (0..a.frame_mask.len())
                .map(|i| {
                    let s = i * HOP_SIZE;
                    rms_of(&clip.samples[s..(s + WINDOW_SIZE).min(clip.len())]).unwrap()
                })
                .collect();
            let energies = sorted.clone();
            sorted.sort_by(f64::total_cmp);
            let cut = VAD_THRESHOLD * percentile(&sorted, 0.95);
            for (i, (x, y)) in a.frame_mask.iter().zip(&b.frame_mask).enumerate() {
                if (energies[i] - cut).abs() > 1e-12 * cut.max(1e-300) {
                    proptest::prop_assert_eq!(x, y);
                }
            }
        }
    }
}
