//! Synthetic mixed tracks: mashability testing, beat alignment and
//! SNR-controlled mixing of a vocal segment with a background segment.
//!
//! Tempo is analysed per track, key per 3-second segment. A pair is only
//! mixed when both agree exactly (see [`check_mashability`]); nothing is
//! time-stretched or transposed to force a match.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{
    chromagram, detect_voiced_frames, estimate_key, estimate_tempo_and_beats, extract_segment, rms,
    segment_voiced_ratio, stft, AudioClip, BeatGrid, KeyEstimate, VoiceActivity, SEGMENT_SECONDS,
};
use crate::error::{Error, Result};
use crate::seed::{self, derive_seed};
use crate::synth::Split;

/// Vocal segments below this voiced ratio are never mixed.
pub const MIN_VOICED_RATIO: f64 = 0.7;
/// Background draws per vocal segment before giving up on it.
pub const DRAW_BUDGET: usize = 100;
/// Peak a mix is scaled to when the sum clips.
pub const MIX_PEAK: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDescriptor {
    pub track_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singer_id: Option<String>,
    /// Seconds from the start of the track.
    pub start: f64,
    pub duration: f64,
    /// Local key of this segment.
    pub key: KeyEstimate,
    /// Tempo of the whole track.
    pub track_tempo: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voiced_ratio: Option<f64>,
}

/// Exact tonic and mode match and track tempos within `tempo_tolerance_bpm`.
/// Relative and parallel keys do not match, and neither do tempo octaves.
pub fn check_mashability(
    vocal: &SegmentDescriptor,
    background: &SegmentDescriptor,
    tempo_tolerance_bpm: f64,
) -> bool {
    (vocal.track_tempo - background.track_tempo).abs() <= tempo_tolerance_bpm
        && vocal.key.same_key(&background.key)
}

/// Linear gains `(vocal, background)` that put the mix at `snr_db` and keep
/// its peak at or below [`MIX_PEAK`] when it would otherwise exceed 1.
pub fn mix_gains(vocal: &AudioClip, background: &AudioClip, snr_db: f64) -> Result<(f64, f64)> {
    if vocal.len() != background.len() || vocal.sample_rate != background.sample_rate {
        return Err(Error::shape(
            format!("{} samples at {} Hz", vocal.len(), vocal.sample_rate),
            format!("{} samples at {} Hz", background.len(), background.sample_rate),
        ));
    }
    let rv = rms(vocal)?;
    let rb = rms(background)?;
    if rv == 0.0 {
        return Err(Error::UndefinedSnr("vocal"));
    }
    if rb == 0.0 {
        return Err(Error::UndefinedSnr("background"));
    }
    let g = rv / (rb * 10f64.powf(snr_db / 20.0));
    let peak = vocal
        .samples
        .iter()
        .zip(&background.samples)
        .fold(0.0f64, |m, (v, b)| m.max((v + g * b).abs()));
    let norm = if peak > 1.0 { MIX_PEAK / peak } else { 1.0 };
    Ok((norm, g * norm))
}

/// `vocal + g·background` with `g` chosen so that
/// `20·log10(rms(vocal) / rms(g·background)) = snr_db`; the sum is scaled
/// to a peak of [`MIX_PEAK`] only if it clips.
pub fn mix_at_snr(vocal: &AudioClip, background: &AudioClip, snr_db: f64) -> Result<AudioClip> {
    let (gv, gb) = mix_gains(vocal, background, snr_db)?;
    let samples = vocal
        .samples
        .iter()
        .zip(&background.samples)
        .map(|(v, b)| gv * v + gb * b)
        .collect();
    AudioClip::new(samples, vocal.sample_rate)
}

/// The beat nearest to `desired_start`; ties go to the earlier beat.
pub fn align_to_beat(grid: &BeatGrid, desired_start: f64) -> Result<f64> {
    let mut best: Option<f64> = None;
    for &b in &grid.beat_times {
        match best {
            Some(cur) if (b - desired_start).abs() >= (cur - desired_start).abs() => {}
            _ => best = Some(b),
        }
    }
    best.ok_or(Error::EmptyGrid)
}

/// Analyses the 3-second segment of `clip` starting at `start`.
pub fn describe_segment(
    clip: &AudioClip,
    track_id: &str,
    singer_id: Option<&str>,
    start: f64,
    track_tempo: f64,
    activity: Option<&VoiceActivity>,
) -> Result<SegmentDescriptor> {
    let seg = extract_segment(clip, start, SEGMENT_SECONDS)?;
    let key = estimate_key(&chromagram(&stft(&seg)?))?;
    let voiced_ratio = activity.map(|a| {
        let first = (start * clip.sample_rate as f64).round() as usize;
        segment_voiced_ratio(a, first, seg.len())
    });
    Ok(SegmentDescriptor {
        track_id: track_id.to_string(),
        singer_id: singer_id.map(str::to_string),
        start,
        duration: SEGMENT_SECONDS,
        key,
        track_tempo,
        voiced_ratio,
    })
}

/// A track handed to the generator.
#[derive(Debug, Clone)]
pub struct TrackInput {
    pub track_id: String,
    pub singer_id: Option<String>,
    /// Pairs are only formed within one split; `None` matches anything.
    pub split: Option<Split>,
    pub clip: AudioClip,
}

#[derive(Debug, Clone)]
pub struct AnalyzedTrack {
    pub input: TrackInput,
    pub grid: BeatGrid,
    pub segments: Vec<SegmentDescriptor>,
}

impl AnalyzedTrack {
    pub fn tempo(&self) -> f64 {
        self.grid.tempo_bpm
    }

    fn compatible_split(&self, other: &AnalyzedTrack) -> bool {
        match (self.input.split, other.input.split) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }
}

fn fits(clip: &AudioClip, start: f64) -> bool {
    start >= 0.0 && ((start + SEGMENT_SECONDS) * clip.sample_rate as f64).round() as usize <= clip.len()
}

/// Vocal segments start on vocal beats and do not overlap; a segment is
/// kept when at least [`MIN_VOICED_RATIO`] of it is voiced and its key is
/// defined, otherwise the next beat is tried.
pub fn analyze_vocal(input: TrackInput) -> Result<AnalyzedTrack> {
    let grid = estimate_tempo_and_beats(&input.clip)?;
    let activity = detect_voiced_frames(&input.clip);
    let mut segments = Vec::new();
    let mut free_from = f64::NEG_INFINITY;
    for &b in &grid.beat_times {
        if b < free_from || !fits(&input.clip, b) {
            continue;
        }
        let d = match describe_segment(
            &input.clip,
            &input.track_id,
            input.singer_id.as_deref(),
            b,
            grid.tempo_bpm,
            Some(&activity),
        ) {
            Ok(d) => d,
            Err(Error::UndefinedKey) => continue,
            Err(e) => return Err(e),
        };
        if d.voiced_ratio.unwrap_or(0.0) >= MIN_VOICED_RATIO {
            free_from = b + SEGMENT_SECONDS;
            segments.push(d);
        }
    }
    Ok(AnalyzedTrack {
        input,
        grid,
        segments,
    })
}

/// Every beat of a background that leaves room for a full segment is a
/// candidate mix offset.
pub fn analyze_background(input: TrackInput) -> Result<AnalyzedTrack> {
    let grid = estimate_tempo_and_beats(&input.clip)?;
    let mut segments = Vec::new();
    for &b in &grid.beat_times {
        if !fits(&input.clip, b) {
            continue;
        }
        match describe_segment(&input.clip, &input.track_id, None, b, grid.tempo_bpm, None) {
            Ok(d) => segments.push(d),
            Err(Error::UndefinedKey) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(AnalyzedTrack {
        input,
        grid,
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MashupRecipe {
    pub vocal: SegmentDescriptor,
    pub background: SegmentDescriptor,
    /// Start of the background segment: one of its beats.
    pub mix_offset: f64,
    /// Gains actually applied, including any anti-clipping scale.
    pub vocal_gain: f64,
    pub background_gain: f64,
    pub target_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MashupConfig {
    pub tempo_tolerance_bpm: f64,
    pub pairs_per_vocal_segment: usize,
    pub target_snr_db: f64,
    pub seed: u64,
}

impl Default for MashupConfig {
    fn default() -> Self {
        MashupConfig {
            tempo_tolerance_bpm: 2.0,
            pairs_per_vocal_segment: 1,
            target_snr_db: 0.0,
            seed: 0,
        }
    }
}

impl MashupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tempo_tolerance_bpm >= 0.0) {
            return Err(Error::Config("tempo tolerance must be non-negative".into()));
        }
        if self.pairs_per_vocal_segment == 0 {
            return Err(Error::Config("pairs per vocal segment must be positive".into()));
        }
        if !self.target_snr_db.is_finite() {
            return Err(Error::Config("target SNR must be finite".into()));
        }
        Ok(())
    }
}

/// First line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub config_hash: String,
    pub seed: u64,
    pub config: MashupConfig,
    pub vocal_segments: usize,
    pub unpaired_segments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MashupManifest {
    pub header: ManifestHeader,
    pub recipes: Vec<MashupRecipe>,
}

impl MashupManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for r in &self.recipes {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = std::io::BufReader::new(f).lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(bad(1, "missing header".into())),
                Some((i, line)) => {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if !line.trim().is_empty() {
                        break serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
                    }
                }
            }
        };
        let mut recipes = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            recipes.push(serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?);
        }
        Ok(MashupManifest { header, recipes })
    }

    pub fn hash(&self) -> Result<String> {
        Ok(seed::hash_bytes(self.to_jsonl()?.as_bytes()))
    }
}

fn pair_segment(
    vocal: &AnalyzedTrack,
    index: usize,
    backgrounds: &[AnalyzedTrack],
    compatible: &[usize],
    used_by_song: &mut HashSet<usize>,
    config: &MashupConfig,
) -> Result<Vec<MashupRecipe>> {
    let seg = &vocal.segments[index];
    let mut rng = seed::rng(derive_seed(
        config.seed,
        &["mashup", &vocal.input.track_id, &index.to_string()],
    ));
    let v_audio = extract_segment(&vocal.input.clip, seg.start, SEGMENT_SECONDS)?;
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::new();
    for draw in 0..DRAW_BUDGET {
        if out.len() >= config.pairs_per_vocal_segment {
            break;
        }
        // first half of the budget: backgrounds this song has not used yet
        let fresh: Vec<usize> = compatible
            .iter()
            .copied()
            .filter(|b| !used_by_song.contains(b))
            .collect();
        let pool = if draw < DRAW_BUDGET / 2 && !fresh.is_empty() {
            &fresh
        } else {
            compatible
        };
        let Some(&bt) = pool.choose(&mut rng) else {
            break;
        };
        let segs = &backgrounds[bt].segments;
        let Some(si) = (!segs.is_empty()).then(|| rand::Rng::random_range(&mut rng, 0..segs.len()))
        else {
            continue;
        };
        if chosen.contains(&(bt, si)) || !check_mashability(seg, &segs[si], config.tempo_tolerance_bpm) {
            continue;
        }
        let bg = &segs[si];
        let b_audio = extract_segment(&backgrounds[bt].input.clip, bg.start, SEGMENT_SECONDS)?;
        let (vocal_gain, background_gain) = match mix_gains(&v_audio, &b_audio, config.target_snr_db) {
            Ok(g) => g,
            Err(Error::UndefinedSnr(_)) => continue,
            Err(e) => return Err(e),
        };
        chosen.push((bt, si));
        used_by_song.insert(bt);
        out.push(MashupRecipe {
            vocal: seg.clone(),
            background: bg.clone(),
            mix_offset: bg.start,
            vocal_gain,
            background_gain,
            target_snr_db: config.target_snr_db,
        });
    }
    Ok(out)
}

/// Pairs every qualifying vocal segment with up to
/// `pairs_per_vocal_segment` mashable background segments.
///
/// Each vocal segment draws from its own RNG stream (derived from the seed,
/// its track id and its index), so the result does not depend on thread
/// scheduling. Only backgrounds whose track tempo is within tolerance are
/// drawn from. Fails when more than half of the segments stay unpaired.
pub fn generate_dataset(
    vocals: &[AnalyzedTrack],
    backgrounds: &[AnalyzedTrack],
    config: &MashupConfig,
) -> Result<MashupManifest> {
    config.validate()?;
    let per_track: Vec<(usize, usize, Vec<MashupRecipe>)> = vocals
        .par_iter()
        .map(|v| {
            let compatible: Vec<usize> = backgrounds
                .iter()
                .enumerate()
                .filter(|(_, b)| {
                    v.compatible_split(b)
                        && (v.tempo() - b.tempo()).abs() <= config.tempo_tolerance_bpm
                })
                .map(|(i, _)| i)
                .collect();
            let mut used = HashSet::new();
            let mut recipes = Vec::new();
            let mut failed = 0;
            for i in 0..v.segments.len() {
                let got = pair_segment(v, i, backgrounds, &compatible, &mut used, config)?;
                failed += got.is_empty() as usize;
                recipes.extend(got);
            }
            Ok((v.segments.len(), failed, recipes))
        })
        .collect::<Result<_>>()?;
    let total: usize = per_track.iter().map(|t| t.0).sum();
    let failed: usize = per_track.iter().map(|t| t.1).sum();
    if total == 0 {
        return Err(Error::Empty("qualifying vocal segments"));
    }
    if 2 * failed > total {
        return Err(Error::NoMashablePairs { failed, total });
    }
    Ok(MashupManifest {
        header: ManifestHeader {
            config_hash: seed::config_hash(config),
            seed: config.seed,
            config: config.clone(),
            vocal_segments: total,
            unpaired_segments: failed,
        },
        recipes: per_track.into_iter().flat_map(|t| t.2).collect(),
    })
}

/// The 3-second mix a recipe describes: exactly
/// [`SEGMENT_SAMPLES`](crate::audio::SEGMENT_SAMPLES) samples.
pub fn render_recipe(recipe: &MashupRecipe, vocal: &AudioClip, background: &AudioClip) -> Result<AudioClip> {
    let v = extract_segment(vocal, recipe.vocal.start, SEGMENT_SECONDS)?;
    let b = extract_segment(background, recipe.mix_offset, SEGMENT_SECONDS)?;
    mix_at_snr(&v, &b, recipe.target_snr_db)
}

/// Re-derives both descriptors from the audio and re-runs the
/// mashability test, trusting nothing stored in the recipe but offsets.
pub fn verify_recipe(
    recipe: &MashupRecipe,
    vocal: &AudioClip,
    background: &AudioClip,
    tempo_tolerance_bpm: f64,
) -> Result<bool> {
    let vt = estimate_tempo_and_beats(vocal)?.tempo_bpm;
    let bt = estimate_tempo_and_beats(background)?.tempo_bpm;
    let v = describe_segment(vocal, &recipe.vocal.track_id, None, recipe.vocal.start, vt, None)?;
    let b = describe_segment(background, &recipe.background.track_id, None, recipe.mix_offset, bt, None)?;
    Ok(check_mashability(&v, &b, tempo_tolerance_bpm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{Mode, SAMPLE_RATE, SEGMENT_SAMPLES};
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64) -> AudioClip {
        let sr = SAMPLE_RATE as f64;
        AudioClip::new(
            (0..SEGMENT_SAMPLES)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / sr).sin())
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    fn desc(tempo: f64, tonic: u8, mode: Mode) -> SegmentDescriptor {
        SegmentDescriptor {
            track_id: "t".into(),
            singer_id: None,
            start: 0.0,
            duration: SEGMENT_SECONDS,
            key: KeyEstimate {
                tonic,
                mode,
                score: 0.8,
            },
            track_tempo: tempo,
            voiced_ratio: None,
        }
    }

    #[test]
    fn mashability_rules() {
        let c_major = desc(120.0, 0, Mode::Major);
        assert!(check_mashability(&c_major, &desc(120.0, 0, Mode::Major), 2.0));
        assert!(!check_mashability(&c_major, &desc(120.0, 9, Mode::Minor), 2.0));
        assert!(!check_mashability(&c_major, &desc(120.0, 0, Mode::Minor), 2.0));
        assert!(!check_mashability(&desc(120.0, 0, Mode::Major), &desc(123.0, 0, Mode::Major), 2.0));
        assert!(check_mashability(&desc(120.0, 0, Mode::Major), &desc(122.0, 0, Mode::Major), 2.0));
        assert!(!check_mashability(&desc(120.0, 0, Mode::Major), &desc(60.0, 0, Mode::Major), 2.0));
    }

    #[test]
    fn snr_arithmetic() {
        let v = sine(440.0, 0.3);
        let b = sine(97.0, 0.2);
        for snr in [-10.0, 0.0, 20.0] {
            let (gv, gb) = mix_gains(&v, &b, snr).unwrap();
            let got = 20.0 * ((gv * rms(&v).unwrap()) / (gb * rms(&b).unwrap())).log10();
            assert!((got - snr).abs() < 1e-9);
        }
        let (gv, gb) = mix_gains(&v, &b, 20.0).unwrap();
        assert!((gb * rms(&b).unwrap() - gv * rms(&v).unwrap() / 10.0).abs() < 1e-12);
    }

    #[test]
    fn same_sine_at_zero_db_doubles() {
        let s = sine(440.0, 0.3);
        let m = mix_at_snr(&s, &s, 0.0).unwrap();
        for (a, b) in m.samples.iter().zip(&s.samples) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        // 2 × 0.6 peak clips → renormalised, shape kept
        let loud = sine(440.0, 0.6);
        let m = mix_at_snr(&loud, &loud, 0.0).unwrap();
        assert!((m.peak() - MIX_PEAK).abs() < 1e-9);
        let ratio = m.samples[100] / loud.samples[100];
        for (a, b) in m.samples.iter().zip(&loud.samples).step_by(97) {
            assert!((a - ratio * b).abs() < 1e-9);
        }
    }

    #[test]
    fn silent_stems_are_rejected() {
        let s = sine(440.0, 0.3);
        let z = AudioClip::silence(SEGMENT_SAMPLES, SAMPLE_RATE);
        assert!(matches!(mix_at_snr(&s, &z, 0.0), Err(Error::UndefinedSnr("background"))));
        assert!(matches!(mix_at_snr(&z, &s, 0.0), Err(Error::UndefinedSnr("vocal"))));
    }

    #[test]
    fn nearest_beat_with_ties_to_the_earlier() {
        let grid = BeatGrid {
            tempo_bpm: 120.0,
            beat_times: vec![0.5, 1.0, 1.5],
        };
        assert_eq!(align_to_beat(&grid, 1.1).unwrap(), 1.0);
        assert_eq!(align_to_beat(&grid, 1.5).unwrap(), 1.5);
        assert_eq!(align_to_beat(&grid, 0.75).unwrap(), 0.5);
        assert_eq!(align_to_beat(&grid, -3.0).unwrap(), 0.5);
        assert_eq!(align_to_beat(&grid, 9.0).unwrap(), 1.5);
        let empty = BeatGrid {
            tempo_bpm: 120.0,
            beat_times: vec![],
        };
        assert!(matches!(align_to_beat(&empty, 1.0), Err(Error::EmptyGrid)));
    }

    proptest::proptest! {
        #[test]
        fn decision_follows_the_rule(
            dt in -5.0f64..5.0,
            tonic in 0u8..12,
            minor in proptest::bool::ANY,
        ) {
            let mode = if minor { Mode::Minor } else { Mode::Major };
            let v = desc(100.0, 0, Mode::Major);
            let b = desc(100.0 + dt, tonic, mode);
            let expect = dt.abs() <= 2.0 && tonic == 0 && !minor;
            proptest::prop_assert_eq!(check_mashability(&v, &b, 2.0), expect);
        }
    }
}
