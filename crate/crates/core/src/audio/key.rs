use serde::{Deserialize, Serialize};

use super::Chromagram;
use crate::error::{Error, Result};

/// Krumhansl–Kessler probe-tone ratings, tonic first.
pub const KRUMHANSL_MAJOR: [f64; 12] = [
    6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88,
];
pub const KRUMHANSL_MINOR: [f64; 12] = [
    6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

impl Mode {
    pub fn profile(self) -> &'static [f64; 12] {
        match self {
            Mode::Major => &KRUMHANSL_MAJOR,
            Mode::Minor => &KRUMHANSL_MINOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyEstimate {
    pub tonic: u8,
    pub mode: Mode,
    pub score: f64,
}

impl KeyEstimate {
    pub fn same_key(&self, other: &KeyEstimate) -> bool {
        self.tonic == other.tonic && self.mode == other.mode
    }
}

const NAMES: [&str; 12] = [
    "C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B",
];

impl std::fmt::Display for KeyEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", NAMES[self.tonic as usize % 12], m)
    }
}

fn pearson(a: &[f64; 12], b: &[f64; 12]) -> Option<f64> {
    let ma = a.iter().sum::<f64>() / 12.0;
    let mb = b.iter().sum::<f64>() / 12.0;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let den = (va * vb).sqrt();
    (den > 1e-300).then(|| num / den)
}

/// Correlates a 12-bin pitch-class profile against all 24 rotated
/// Krumhansl profiles; ties go to the first candidate (majors C..B, then
/// minors C..B).
pub fn key_from_profile(profile: &[f64; 12]) -> Result<KeyEstimate> {
    let mut best: Option<KeyEstimate> = None;
    for mode in [Mode::Major, Mode::Minor] {
        let base = mode.profile();
        for tonic in 0..12u8 {
            let rotated: [f64; 12] =
                std::array::from_fn(|pc| base[(pc + 12 - tonic as usize) % 12]);
            let score = pearson(profile, &rotated).ok_or(Error::UndefinedKey)?;
            if best.map_or(true, |b| score > b.score) {
                best = Some(KeyEstimate { tonic, mode, score });
            }
        }
    }
    best.ok_or(Error::UndefinedKey)
}

/// Krumhansl–Schmuckler key of the time-averaged chroma.
pub fn estimate_key(chroma: &Chromagram) -> Result<KeyEstimate> {
    if chroma.n_frames == 0 {
        return Err(Error::Empty("chromagram without frames"));
    }
    let mean = chroma.mean();
    if mean.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedKey);
    }
    key_from_profile(&mean)
}
