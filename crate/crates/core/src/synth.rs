//! Procedural test corpus: synthetic singers (harmonic source, formant
//! resonators, vibrato) and drum-plus-chord backgrounds with known tempo
//! and key.

use std::f64::consts::PI;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip, Mode as KeyMode, KRUMHANSL_MAJOR, KRUMHANSL_MINOR, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed::{self, derive_seed};

/// Minimum L2 distance between the formant triples of a roster.
pub const MIN_FORMANT_DISTANCE: f64 = 50.0;
const PEAK: f64 = 0.9;
/// RMS of the aspiration noise relative to the voiced part.
const BREATH_LEVEL: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MusicalKey {
    pub tonic: u8,
    pub mode: KeyMode,
}

impl MusicalKey {
    pub fn new(tonic: u8, mode: KeyMode) -> Result<Self> {
        if tonic > 11 {
            return Err(Error::Config(format!("tonic {tonic} is not a pitch class")));
        }
        Ok(MusicalKey { tonic, mode })
    }

    /// Pitch classes of the scale; minor keys use the harmonic form so the
    /// leading tone distinguishes them from the relative major.
    pub fn scale(&self) -> [u8; 7] {
        let steps: [u8; 7] = match self.mode {
            KeyMode::Major => [0, 2, 4, 5, 7, 9, 11],
            KeyMode::Minor => [0, 2, 3, 5, 7, 8, 11],
        };
        steps.map(|s| (self.tonic + s) % 12)
    }

    pub fn contains(&self, midi: i32) -> bool {
        self.scale().contains(&(midi.rem_euclid(12) as u8))
    }

    /// Probe-tone weight of a pitch class in this key.
    fn weight(&self, pc: u8) -> f64 {
        let profile = match self.mode {
            KeyMode::Major => &KRUMHANSL_MAJOR,
            KeyMode::Minor => &KRUMHANSL_MINOR,
        };
        profile[((pc + 12 - self.tonic) % 12) as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingerProfile {
    /// Hz, strictly increasing.
    pub formant_freqs: [f64; 3],
    pub formant_bandwidths: [f64; 3],
    pub vibrato_rate: f64,
    /// Cents.
    pub vibrato_depth: f64,
    /// dB per octave of harmonic number (negative).
    pub spectral_rolloff: f64,
    /// MIDI note at the centre of the singer's range.
    pub pitch_base: u8,
    pub seed: u64,
}

impl SingerProfile {
    pub fn formant_distance(&self, other: &SingerProfile) -> f64 {
        self.formant_freqs
            .iter()
            .zip(&other.formant_freqs)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn gen_singer(seed: u64) -> SingerProfile {
    let mut rng = seed::rng(derive_seed(seed, &["singer"]));
    let f1: f64 = rng.random_range(280.0..850.0);
    let f2: f64 = rng.random_range((f1 + 350.0).max(900.0)..2400.0);
    let f3 = rng.random_range((f2 + 400.0).max(2300.0)..3800.0);
    SingerProfile {
        formant_freqs: [f1, f2, f3],
        formant_bandwidths: [
            rng.random_range(50.0..130.0),
            rng.random_range(70.0..180.0),
            rng.random_range(100.0..250.0),
        ],
        vibrato_rate: rng.random_range(4.5..7.5),
        vibrato_depth: rng.random_range(8.0..30.0),
        spectral_rolloff: rng.random_range(-15.0..-5.0),
        pitch_base: rng.random_range(70..=78),
        seed,
    }
}

/// `n` singers whose formant triples are pairwise at least
/// [`MIN_FORMANT_DISTANCE`] apart; candidates that come too close to an
/// accepted singer are rejected and redrawn from the next derived seed.
pub fn singer_roster(n: usize, seed: u64) -> Vec<SingerProfile> {
    let mut out: Vec<SingerProfile> = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        let cand = gen_singer(derive_seed(seed, &["roster", &attempt.to_string()]));
        attempt += 1;
        if out
            .iter()
            .all(|s| s.formant_distance(&cand) >= MIN_FORMANT_DISTANCE)
        {
            out.push(cand);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub midi: i32,
    pub start_beat: f64,
    pub beats: f64,
}

/// Random melody of `bars` 4/4 bars in `key` around the singer's register.
/// Phrases are two bars long, open and close on the tonic and end with a
/// one-beat rest; pitches in between follow a random walk weighted by the
/// key's probe-tone profile.
pub fn random_melody(key: MusicalKey, pitch_base: u8, bars: usize, seed: u64) -> Vec<Note> {
    let mut rng = seed::rng(derive_seed(seed, &["melody"]));
    let lo = pitch_base as i32 - 7;
    let hi = pitch_base as i32 + 7;
    let candidates: Vec<i32> = (lo..=hi).filter(|&m| key.contains(m)).collect();
    let nearest_tonic = candidates
        .iter()
        .copied()
        .filter(|&m| m.rem_euclid(12) as u8 == key.tonic)
        .min_by_key(|&m| (m - pitch_base as i32).abs())
        .unwrap_or(candidates[candidates.len() / 2]);
    let mut notes = Vec::new();
    let mut current = nearest_tonic;
    let total_beats = bars * 4;
    let mut beat = 0usize;
    while beat < total_beats {
        let phrase_end = (beat / 8 + 1) * 8;
        let last_sung = phrase_end.min(total_beats) - 1;
        if beat == last_sung && phrase_end <= total_beats {
            beat += 1; // rest
            continue;
        }
        let room = last_sung - beat;
        let beats = if room >= 2 && rng.random::<f64>() < 0.15 { 2 } else { 1 };
        let phrase_edge = beat % 8 == 0 || beat + beats > last_sung;
        let weights: Vec<f64> = candidates
            .iter()
            .map(|&m| {
                let pc = m.rem_euclid(12) as u8;
                if phrase_edge && pc != key.tonic {
                    return 0.0;
                }
                let w = key.weight(pc);
                w.powi(3) * (-((m - current).abs() as f64) / 3.0).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = candidates[0];
        for (&m, &w) in candidates.iter().zip(&weights) {
            pick = m;
            if u < w {
                break;
            }
            u -= w;
        }
        current = pick;
        notes.push(Note {
            midi: pick,
            start_beat: beat as f64,
            beats: beats as f64,
        });
        beat += beats;
    }
    notes
}

/// Ascending scale from the tonic up an octave and back, with the tonic
/// held for two beats at both ends.
pub fn scale_melody(key: MusicalKey, pitch_base: u8) -> Vec<Note> {
    let base = pitch_base as i32;
    let start = (base - 11..=base)
        .find(|m| m.rem_euclid(12) as u8 == key.tonic)
        .expect("12 consecutive notes cover every pitch class");
    let mut pitches: Vec<i32> = (start..=start + 12).filter(|&m| key.contains(m)).collect();
    let down: Vec<i32> = pitches.iter().rev().skip(1).copied().collect();
    pitches.extend(down);
    let mut notes = Vec::new();
    let mut beat = 0.0;
    for (i, &m) in pitches.iter().enumerate() {
        let beats = if i == 0 || i + 1 == pitches.len() { 2.0 } else { 1.0 };
        notes.push(Note {
            midi: m,
            start_beat: beat,
            beats,
        });
        beat += beats;
    }
    notes
}

fn midi_hz(m: f64) -> f64 {
    440.0 * 2f64.powf((m - 69.0) / 12.0)
}

/// Magnitude of a unit-DC-gain two-pole resonator.
fn resonance(f: f64, centre: f64, bandwidth: f64) -> f64 {
    let r = f / centre;
    1.0 / ((1.0 - r * r).powi(2) + (f * bandwidth / (centre * centre)).powi(2)).sqrt()
}

fn harmonic_amplitudes(profile: &SingerProfile, f0: f64, sr: f64) -> Vec<f64> {
    let limit = (0.45 * sr).min(9000.0);
    let n = (limit / f0).floor().max(1.0) as usize;
    let mut amps: Vec<f64> = (1..=n)
        .map(|h| {
            let f = h as f64 * f0;
            let tilt = 10f64.powf(profile.spectral_rolloff * (h as f64).log2() / 20.0);
            let formants: f64 = (0..3)
                .map(|j| resonance(f, profile.formant_freqs[j], profile.formant_bandwidths[j]))
                .product();
            tilt * formants
        })
        .collect();
    let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
    amps.iter_mut().for_each(|a| *a /= norm);
    amps
}

/// Runs `x` through the singer's three formant resonators in cascade.
fn formant_filter(profile: &SingerProfile, x: &mut [f64], sr: f64) {
    for (&f, &bw) in profile.formant_freqs.iter().zip(&profile.formant_bandwidths) {
        let r = (-PI * bw / sr).exp();
        let a1 = 2.0 * r * (2.0 * PI * f / sr).cos();
        let a2 = -r * r;
        let (mut y1, mut y2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = *v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

fn rms_of(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn normalize_peak(samples: &mut [f64]) {
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|x| *x *= PEAK / peak);
    }
}

/// Renders a melody sung by `profile` at `tempo_bpm`. Every note must lie
/// within an octave of the singer's base pitch and in `key`'s scale.
pub fn render_vocal(
    profile: &SingerProfile,
    melody: &[Note],
    tempo_bpm: f64,
    key: MusicalKey,
) -> Result<AudioClip> {
    if melody.is_empty() {
        return Err(Error::Empty("melody"));
    }
    if !(tempo_bpm > 0.0) {
        return Err(Error::Config(format!("tempo {tempo_bpm} must be positive")));
    }
    for n in melody {
        if (n.midi - profile.pitch_base as i32).abs() > 12 {
            return Err(Error::Config(format!(
                "note {} lies outside ±12 semitones of the singer's base {}",
                n.midi, profile.pitch_base
            )));
        }
        if !key.contains(n.midi) {
            return Err(Error::Config(format!("note {} is not in the requested key", n.midi)));
        }
        if !(n.beats > 0.0) || n.start_beat < 0.0 {
            return Err(Error::Config("notes need a non-negative start and positive length".into()));
        }
    }
    let sr = SAMPLE_RATE as f64;
    let spb = 60.0 / tempo_bpm;
    let end_beat = melody
        .iter()
        .map(|n| n.start_beat + n.beats)
        .fold(0.0, f64::max);
    let len = ((end_beat * spb + 0.25) * sr).ceil() as usize;
    let mut out = vec![0.0; len];
    let mut breath = vec![0.0; len];
    let noise = Normal::new(0.0, 1.0).expect("valid");
    let mut rng = seed::rng(derive_seed(profile.seed, &["performance"]));
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let (attack, release, gap) = (0.01, 0.025, 0.06);
    for note in melody {
        let f0 = midi_hz(note.midi as f64);
        let amps = harmonic_amplitudes(profile, f0, sr);
        let gain = 10f64.powf(rng.random_range(-2.0..2.0) / 20.0);
        let t0 = note.start_beat * spb;
        let dur = (note.beats * spb - gap).max(attack + release);
        let i0 = (t0 * sr).round() as usize;
        let n_samp = ((dur + release) * sr).round() as usize;
        let mut phase = 0.0f64;
        for k in 0..n_samp {
            let idx = i0 + k;
            if idx >= len {
                break;
            }
            let t = k as f64 / sr;
            let abs_t = t0 + t;
            let vib = profile.vibrato_depth / 1200.0
                * (2.0 * PI * profile.vibrato_rate * abs_t + vib_phase).sin();
            phase += 2.0 * PI * f0 * 2f64.powf(vib) / sr;
            let env = if t < attack {
                t / attack
            } else if t < dur {
                1.0
            } else {
                (1.0 - (t - dur) / release).max(0.0)
            };
            // Σ a_h sin(hφ) by the Chebyshev recurrence
            let (s1, c) = phase.sin_cos();
            let (mut prev, mut cur) = (0.0, s1);
            let mut acc = amps[0] * s1;
            for &a in &amps[1..] {
                let next = 2.0 * c * cur - prev;
                prev = cur;
                cur = next;
                acc += a * cur;
            }
            out[idx] += gain * env * acc;
            breath[idx] += gain * env * noise.sample(&mut rng);
        }
    }
    // aspiration noise through the same formants keeps the spectral
    // envelope visible between the widely spaced harmonics of high notes
    formant_filter(profile, &mut breath, sr);
    let scale = BREATH_LEVEL * rms_of(&out) / rms_of(&breath).max(1e-12);
    out.iter_mut().zip(&breath).for_each(|(o, b)| *o += scale * b);
    normalize_peak(&mut out);
    AudioClip::new(out, SAMPLE_RATE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundProfile {
    pub tempo_bpm: f64,
    pub key: MusicalKey,
    pub instrumentation_seed: u64,
}

fn triad(key: MusicalKey, degree: usize) -> [i32; 3] {
    let scale = key.scale();
    [0, 2, 4].map(|s| scale[(degree + s) % 7] as i32)
}

/// Kick on every beat, snare on beats 2 and 4, off-beat hats, and a
/// I–IV–V–I progression (one chord per bar) with a bass root.
pub fn render_background(profile: &BackgroundProfile, duration: f64) -> Result<AudioClip> {
    if duration < 5.0 {
        return Err(Error::TooShort {
            needed: 5 * SAMPLE_RATE as usize,
            got: (duration.max(0.0) * SAMPLE_RATE as f64) as usize,
        });
    }
    if !(60.0..=200.0).contains(&profile.tempo_bpm) {
        return Err(Error::Config(format!(
            "background tempo {} outside 60–200 BPM",
            profile.tempo_bpm
        )));
    }
    let sr = SAMPLE_RATE as f64;
    let len = (duration * sr).round() as usize;
    let mut out = vec![0.0; len];
    let mut rng = seed::rng(derive_seed(profile.instrumentation_seed, &["background"]));
    let spb = 60.0 / profile.tempo_bpm;
    let n_harm = rng.random_range(2..5);
    let timbre: Vec<f64> = (1..=n_harm)
        .map(|h| rng.random_range(0.3..1.0) / (h * h) as f64)
        .collect();
    let kick_pitch = rng.random_range(34.0..42.0);
    let snare_tone = rng.random_range(160.0..240.0);
    let noise = Normal::new(0.0, 1.0).expect("valid");
    let mut add = |start: f64, samples: &[f64]| {
        let i0 = (start * sr).round() as usize;
        for (k, &v) in samples.iter().enumerate() {
            if let Some(o) = out.get_mut(i0 + k) {
                *o += v;
            }
        }
    };
    let n_beats = (duration / spb).ceil() as usize;
    for b in 0..n_beats {
        let t = b as f64 * spb;
        let kick: Vec<f64> = (0..(0.2 * sr) as usize)
            .map(|k| {
                // pitch glides down from kick_pitch + 40 Hz
                let tt = k as f64 / sr;
                let ph = 2.0 * PI * (kick_pitch * tt + 40.0 * 0.015 * (1.0 - (-tt / 0.015).exp()));
                0.45 * (-tt / 0.06).exp() * ph.sin()
            })
            .collect();
        add(t, &kick);
        if b % 4 == 1 || b % 4 == 3 {
            let snare: Vec<f64> = (0..(0.15 * sr) as usize)
                .map(|k| {
                    let tt = k as f64 / sr;
                    let env = (-tt / 0.05).exp();
                    0.35 * env * noise.sample(&mut rng) + 0.2 * env * (2.0 * PI * snare_tone * tt).sin()
                })
                .collect();
            add(t, &snare);
        }
        let mut last = 0.0;
        let hat: Vec<f64> = (0..(0.04 * sr) as usize)
            .map(|k| {
                let x: f64 = noise.sample(&mut rng);
                let hp = x - last;
                last = x;
                0.06 * (-(k as f64 / sr) / 0.012).exp() * hp
            })
            .collect();
        add(t, &hat);
    }
    // i–iv–V–i in harmonic minor correlates with the parallel major
    // about as well as with the minor profile; i–VI–iv–V does not
    let progression = match profile.key.mode {
        KeyMode::Major => [0usize, 3, 4, 0],
        KeyMode::Minor => [0usize, 5, 3, 4],
    };
    let bar = 4.0 * spb;
    let n_bars = (duration / bar).ceil() as usize;
    for i in 0..n_bars {
        let chord = triad(profile.key, progression[i % 4]);
        let t0 = i as f64 * bar;
        // one octave high enough that STFT bins resolve semitones; the
        // root is weighted up in place of a bass line
        let voices: Vec<(f64, f64)> = chord
            .iter()
            .enumerate()
            .map(|(j, &pc)| {
                let m = 72.0 + (pc as i32 - 72).rem_euclid(12) as f64;
                (m, if j == 0 { 1.5 } else { 1.0 })
            })
            .collect();
        let n = (bar * sr) as usize;
        let mut buf = vec![0.0; n];
        for &(m, weight) in &voices {
            let f0 = midi_hz(m);
            for (k, v) in buf.iter_mut().enumerate() {
                let tt = k as f64 / sr;
                let env = (tt / 0.01).min(1.0) * (0.6 + 0.4 * (-tt / 0.3).exp())
                    * ((bar - tt) / 0.05).clamp(0.0, 1.0);
                let s: f64 = timbre
                    .iter()
                    .enumerate()
                    .map(|(h, a)| a * (2.0 * PI * f0 * (h + 1) as f64 * tt).sin())
                    .sum();
                *v += 0.12 * weight * env * s;
            }
        }
        add(t0, &buf);
    }
    // broadband layers: a bright pad an octave down shaped by random body
    // resonances, and a resonant noise wash pulsing on eighth notes; both
    // overlap the vocal formant range the way real accompaniment does
    let body: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(400.0..3500.0), rng.random_range(150.0..500.0)))
        .collect();
    let pad_level = rng.random_range(0.05..0.08);
    for i in 0..n_bars {
        let chord = triad(profile.key, progression[i % 4]);
        let t0 = i as f64 * bar;
        let n = (bar * sr) as usize;
        let mut buf = vec![0.0; n];
        for &pc in &chord {
            let f0 = midi_hz(60.0 + (pc as i32 - 60).rem_euclid(12) as f64);
            let n_h = (6000.0 / f0) as usize;
            let amps: Vec<f64> = (1..=n_h)
                .map(|h| {
                    let f = h as f64 * f0;
                    let shape: f64 = body.iter().map(|&(c, bw)| resonance(f, c, bw).min(8.0)).sum();
                    shape / (h as f64).powf(1.5)
                })
                .collect();
            let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
            for (k, v) in buf.iter_mut().enumerate() {
                let tt = k as f64 / sr;
                let env = (tt / 0.08).min(1.0) * ((bar - tt) / 0.08).clamp(0.0, 1.0);
                let phase = 2.0 * PI * f0 * tt;
                let (s1, c) = phase.sin_cos();
                let (mut prev, mut cur) = (0.0, s1);
                let mut acc = amps[0] * s1;
                for &a in &amps[1..] {
                    let next = 2.0 * c * cur - prev;
                    prev = cur;
                    cur = next;
                    acc += a * cur;
                }
                *v += pad_level * env * acc / norm;
            }
        }
        add(t0, &buf);
    }
    let mut wash: Vec<f64> = (0..len).map(|_| noise.sample(&mut rng)).collect();
    for &(c, bw) in body.iter().take(2) {
        let r = (-PI * bw / sr).exp();
        let (a1, a2) = (2.0 * r * (2.0 * PI * c / sr).cos(), -r * r);
        let (mut y1, mut y2) = (0.0, 0.0);
        for v in wash.iter_mut() {
            let y = *v * (1.0 - r) + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
    let wash_scale = rng.random_range(0.02..0.04) / rms_of(&wash).max(1e-12);
    let eighth = spb / 2.0;
    for (k, w) in wash.iter_mut().enumerate() {
        let pos = (k as f64 / sr) % eighth;
        *w *= wash_scale * (0.4 + 0.6 * (-pos / 0.08).exp());
    }
    add(0.0, &wash);
    normalize_peak(&mut out);
    AudioClip::new(out, SAMPLE_RATE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Vocal,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected train or test"))),
        }
    }
}

/// One line of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub track_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singer_id: Option<String>,
    pub role: Role,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub tempo: f64,
    pub key: MusicalKey,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<CorpusEntry>,
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
}

pub const CORPUS_MANIFEST: &str = "corpus.jsonl";

impl CorpusManifest {
    pub fn resolve(&self, entry: &CorpusEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn vocals(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(|e| e.role == Role::Vocal)
    }

    pub fn backgrounds(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(|e| e.role == Role::Background)
    }

    /// Singer ids of one split, in first-appearance order.
    pub fn singers(&self, split: Split) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in self.vocals().filter(|e| e.split == split) {
            if let Some(s) = &e.singer_id {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e)?);
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
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })?);
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(CorpusManifest { entries, root })
    }

    pub fn hash(&self) -> Result<String> {
        Ok(seed::hash_bytes(self.to_jsonl()?.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_singers: usize,
    pub tracks_per_singer: usize,
    /// Defaults to a third of the singers, rounded up.
    pub test_singers: Option<usize>,
    pub seed: u64,
    /// Approximate length of a vocal track; rounded up to whole bars.
    pub vocal_seconds: f64,
    pub background_seconds: f64,
    /// Distinct (tempo, key) settings shared by vocals and backgrounds.
    pub n_styles: usize,
    /// Backgrounds per style in each split.
    pub backgrounds_per_style: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_singers: 30,
            tracks_per_singer: 10,
            test_singers: None,
            seed: 0,
            vocal_seconds: 14.0,
            background_seconds: 24.0,
            n_styles: 6,
            backgrounds_per_style: 2,
        }
    }
}

impl CorpusConfig {
    pub fn n_test_singers(&self) -> usize {
        self.test_singers.unwrap_or(self.n_singers.div_ceil(3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_singers < 2 {
            return Err(Error::Config("a corpus needs at least two singers".into()));
        }
        if self.tracks_per_singer == 0 || self.n_styles == 0 || self.backgrounds_per_style == 0 {
            return Err(Error::Config("track, style and background counts must be positive".into()));
        }
        if self.n_test_singers() >= self.n_singers {
            return Err(Error::Config("the train split would have no singers".into()));
        }
        if self.vocal_seconds < 5.0 || self.background_seconds < 5.0 {
            return Err(Error::Config("tracks must be at least 5 s long".into()));
        }
        Ok(())
    }
}

/// (tempo, key) pairs. Tempos come off a 6-BPM grid over 84–120 (then
/// 87–123), far enough apart that distinct styles never pass a ±2 BPM
/// tempo test, and slow enough that vocal tempo estimates do not halve.
pub fn corpus_styles(n: usize, seed: u64) -> Vec<(f64, MusicalKey)> {
    let mut rng = seed::rng(derive_seed(seed, &["styles"]));
    let mut grid: Vec<f64> = (0..7).map(|i| 84.0 + 6.0 * i as f64).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if grid.is_empty() {
            grid = (0..7).map(|j| 87.0 + 6.0 * j as f64).collect();
        }
        let idx = rng.random_range(0..grid.len());
        let tempo = grid.remove(idx);
        let mode = if i % 2 == 0 { KeyMode::Major } else { KeyMode::Minor };
        let key = MusicalKey {
            tonic: rng.random_range(0..12),
            mode,
        };
        out.push((tempo, key));
    }
    out
}

struct Job {
    entry: CorpusEntry,
    render: Box<dyn Fn() -> Result<AudioClip> + Send + Sync>,
}

/// Renders the corpus to `out_dir` (vocals/, backgrounds/, corpus.jsonl).
/// The last `n_test_singers` singers form the test split.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    config.validate()?;
    for sub in ["vocals", "backgrounds"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let singers = singer_roster(config.n_singers, config.seed);
    let styles = corpus_styles(config.n_styles, config.seed);
    let n_train = config.n_singers - config.n_test_singers();
    let mut jobs: Vec<Job> = Vec::new();
    let mut style_rng = seed::rng(derive_seed(config.seed, &["assign"]));
    for (si, profile) in singers.iter().enumerate() {
        let split = if si < n_train { Split::Train } else { Split::Test };
        for ti in 0..config.tracks_per_singer {
            let (tempo, key) = *styles.choose(&mut style_rng).expect("n_styles > 0");
            let track_id = format!("s{si:03}_t{ti:02}");
            let bars = (config.vocal_seconds / (4.0 * 60.0 / tempo)).ceil().max(2.0) as usize;
            let melody_seed = derive_seed(config.seed, &["melody", &track_id]);
            let profile = profile.clone();
            jobs.push(Job {
                entry: CorpusEntry {
                    singer_id: Some(format!("singer{si:03}")),
                    role: Role::Vocal,
                    path: format!("vocals/{track_id}.wav"),
                    track_id,
                    tempo,
                    key,
                    split,
                },
                render: Box::new(move || {
                    let melody = random_melody(key, profile.pitch_base, bars, melody_seed);
                    render_vocal(&profile, &melody, tempo, key)
                }),
            });
        }
    }
    let mut bi = 0;
    for split in [Split::Train, Split::Test] {
        for &(tempo, key) in &styles {
            for _ in 0..config.backgrounds_per_style {
                let track_id = format!("bg{bi:03}");
                bi += 1;
                let profile = BackgroundProfile {
                    tempo_bpm: tempo,
                    key,
                    instrumentation_seed: derive_seed(config.seed, &["instrument", &track_id]),
                };
                let dur = config.background_seconds;
                jobs.push(Job {
                    entry: CorpusEntry {
                        singer_id: None,
                        role: Role::Background,
                        path: format!("backgrounds/{track_id}.wav"),
                        track_id,
                        tempo,
                        key,
                        split,
                    },
                    render: Box::new(move || render_background(&profile, dur)),
                });
            }
        }
    }
    jobs.par_iter()
        .map(|job| {
            let clip = (job.render)()?;
            write_wav(out_dir.join(&job.entry.path), &clip, false)
        })
        .collect::<Result<Vec<()>>>()?;
    let manifest = CorpusManifest {
        entries: jobs.into_iter().map(|j| j.entry).collect(),
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(CORPUS_MANIFEST))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{chromagram, estimate_key, estimate_tempo_and_beats, stft};

    #[test]
    fn singer_is_deterministic_and_ordered() {
        for s in 0..50 {
            let p = gen_singer(s);
            assert_eq!(p, gen_singer(s));
            assert!(p.formant_freqs[0] < p.formant_freqs[1]);
            assert!(p.formant_freqs[1] < p.formant_freqs[2]);
            assert!(p.formant_freqs.iter().all(|f| (200.0..=4000.0).contains(f)));
            assert!((4.0..=8.0).contains(&p.vibrato_rate));
        }
    }

    #[test]
    fn roster_enforces_formant_spacing() {
        let r = singer_roster(100, 3);
        assert_eq!(r.len(), 100);
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                assert!(r[i].formant_distance(&r[j]) >= MIN_FORMANT_DISTANCE);
            }
        }
    }

    #[test]
    fn vocal_render_contract() {
        let p = gen_singer(1);
        let key = MusicalKey::new(7, KeyMode::Major).unwrap();
        let m = random_melody(key, p.pitch_base, 4, 9);
        let a = render_vocal(&p, &m, 110.0, key).unwrap();
        let b = render_vocal(&p, &m, 110.0, key).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sample_rate, 22050);
        let mut bad = m.clone();
        bad[0].midi = p.pitch_base as i32 + 13;
        assert!(render_vocal(&p, &bad, 110.0, key).is_err());
    }

    #[test]
    fn background_duration_tempo_and_key() {
        let profile = BackgroundProfile {
            tempo_bpm: 120.0,
            key: MusicalKey::new(7, KeyMode::Major).unwrap(),
            instrumentation_seed: 5,
        };
        let clip = render_background(&profile, 12.0).unwrap();
        assert_eq!(clip.len(), 12 * 22050);
        let grid = estimate_tempo_and_beats(&clip).unwrap();
        assert!((grid.tempo_bpm - 120.0).abs() <= 2.0, "{}", grid.tempo_bpm);
        let key = estimate_key(&chromagram(&stft(&clip).unwrap())).unwrap();
        assert_eq!((key.tonic, key.mode), (7, KeyMode::Major), "{key}");
        assert!(render_background(&profile, 4.0).is_err());
    }
}
