use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Reads a PCM16 or float32 WAV file as a mono clip at [`SAMPLE_RATE`].
///
/// Stereo is averaged to mono. Integer samples are scaled by 1/32768.
/// Files at other rates are resampled by linear interpolation, which is
/// cheap and adequate for the ≤ 11 kHz content the analysis looks at.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedEncoding(format!("{channels} channels")));
    }
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Int, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{bits}-bit integer PCM")))
        }
        (SampleFormat::Float, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{bits}-bit float")))
        }
    };
    let mono: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|f| 0.5 * (f[0] + f[1]))
            .collect()
    };
    let clip = AudioClip::new(mono, spec.sample_rate)?;
    if clip.sample_rate == SAMPLE_RATE {
        Ok(clip)
    } else {
        Ok(resample_linear(&clip, SAMPLE_RATE))
    }
}

/// Linear-interpolation resampler.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> AudioClip {
    if clip.sample_rate == target_rate || clip.samples.is_empty() {
        return AudioClip {
            samples: clip.samples.clone(),
            sample_rate: target_rate,
        };
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = ((clip.samples.len() as f64) / ratio).floor() as usize;
    let last = clip.samples.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let idx = pos.floor() as usize;
            let frac = pos - idx as f64;
            let a = clip.samples[idx.min(last)];
            let b = clip.samples[(idx + 1).min(last)];
            a + (b - a) * frac
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: target_rate,
    }
}

/// Writes a mono WAV file, either 16-bit PCM (clamped) or 32-bit float.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, float32: bool) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: if float32 { 32 } else { 16 },
        sample_format: if float32 {
            SampleFormat::Float
        } else {
            SampleFormat::Int
        },
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &clip.samples {
        if float32 {
            writer.write_sample(s as f32).map_err(wav_err)?;
        } else {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: WavSpec, frames: &[i16]) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in frames {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    fn pcm16(channels: u16, rate: u32) -> WavSpec {
        WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        }
    }

    #[test]
    fn three_seconds_mono() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, pcm16(1, SAMPLE_RATE), &vec![100i16; 66150]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.len(), 66150);
        assert_eq!(clip.sample_rate, SAMPLE_RATE);
    }

    #[test]
    fn antiphase_stereo_downmixes_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let frames: Vec<i16> = (0..2000)
            .flat_map(|i| {
                let x = ((i * 37) % 2000) as i16 - 1000;
                [x, -x]
            })
            .collect();
        write_raw(&p, pcm16(2, SAMPLE_RATE), &frames);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.len(), 2000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        write_raw(&p, pcm16(1, SAMPLE_RATE), &[32767, -32768, 0]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples, vec![32767.0 / 32768.0, -1.0, 0.0]);
    }

    #[test]
    fn unsupported_bit_depth_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        match load_wav(&p) {
            Err(Error::UnsupportedEncoding(msg)) => assert!(msg.contains("24-bit")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_wav("/nonexistent/file.wav"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn other_rates_are_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_raw(&p, pcm16(1, 44100), &vec![1000i16; 44100]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.sample_rate, SAMPLE_RATE);
        assert_eq!(clip.len(), 22050);
        assert!(clip.samples.iter().all(|&s| (s - 1000.0 / 32768.0).abs() < 1e-12));
    }

    #[test]
    fn float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.wav");
        let clip = AudioClip::new(vec![0.25, -0.5, 0.125], SAMPLE_RATE).unwrap();
        write_wav(&p, &clip, true).unwrap();
        assert_eq!(load_wav(&p).unwrap(), clip);
    }
}
