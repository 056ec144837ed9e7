//! From a corpus on disk to model inputs: analysed tracks, the training
//! segment bank, and full-length mixed versions of evaluation tracks.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{
    detect_voiced_frames, extract_segment, load_wav, mel_spectrogram, stft, AudioClip,
    VoiceActivity, SEGMENT_SECONDS,
};
use crate::error::{Error, Result};
use crate::mashup::{
    analyze_background, analyze_vocal, mix_gains, render_recipe, AnalyzedTrack, MashupManifest,
    TrackInput,
};
use crate::model::{Domain, SegmentBank, TrainItem};
use crate::seed::{self, derive_seed};
use crate::synth::{CorpusEntry, CorpusManifest, Split};

/// Model input for the 3 s of `clip` starting at `start`: a 129 × 128
/// log-mel matrix, row-major by frame.
pub fn segment_input(clip: &AudioClip, start: f64) -> Result<Vec<f32>> {
    let seg = extract_segment(clip, start, SEGMENT_SECONDS)?;
    Ok(mel_spectrogram(&stft(&seg)?)?.to_f32())
}

/// Every track of a corpus, loaded and analysed (tempo, beats, segments).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub vocals: Vec<AnalyzedTrack>,
    pub backgrounds: Vec<AnalyzedTrack>,
}

impl Corpus {
    pub fn load(manifest: CorpusManifest) -> Result<Self> {
        let analyse = |e: &CorpusEntry, vocal: bool| -> Result<AnalyzedTrack> {
            let input = TrackInput {
                track_id: e.track_id.clone(),
                singer_id: e.singer_id.clone(),
                split: Some(e.split),
                clip: load_wav(manifest.resolve(e))?,
            };
            if vocal {
                analyze_vocal(input)
            } else {
                analyze_background(input)
            }
        };
        let vocals: Vec<&CorpusEntry> = manifest.vocals().collect();
        let bgs: Vec<&CorpusEntry> = manifest.backgrounds().collect();
        let vocals = vocals.par_iter().map(|e| analyse(e, true)).collect::<Result<_>>()?;
        let backgrounds = bgs.par_iter().map(|e| analyse(e, false)).collect::<Result<_>>()?;
        Ok(Corpus {
            manifest,
            vocals,
            backgrounds,
        })
    }

    pub fn vocal(&self, track_id: &str) -> Option<&AnalyzedTrack> {
        self.vocals.iter().find(|t| t.input.track_id == track_id)
    }

    pub fn background(&self, track_id: &str) -> Option<&AnalyzedTrack> {
        self.backgrounds.iter().find(|t| t.input.track_id == track_id)
    }

    pub fn vocals_in(&self, split: Split) -> Vec<&AnalyzedTrack> {
        self.vocals.iter().filter(|t| t.input.split == Some(split)).collect()
    }

    pub fn backgrounds_in(&self, split: Split) -> Vec<&AnalyzedTrack> {
        self.backgrounds
            .iter()
            .filter(|t| t.input.split == Some(split))
            .collect()
    }

    /// Singer ids of a split in manifest order.
    pub fn singers(&self, split: Split) -> Vec<String> {
        self.manifest.singers(split)
    }
}

/// The training bank and the singer ids behind its dense labels.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub bank: SegmentBank,
    pub singers: Vec<String>,
}

/// Monophonic items are the analysed vocal segments of `split`; mixed items
/// are the rendered recipes whose vocal belongs to `split`.
pub fn build_training_set(
    corpus: &Corpus,
    mashups: &MashupManifest,
    split: Split,
    input_len: usize,
) -> Result<TrainingSet> {
    let singers = corpus.singers(split);
    let label: HashMap<&str, usize> = singers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let vocals = corpus.vocals_in(split);
    let track_index: HashMap<&str, usize> = vocals
        .iter()
        .enumerate()
        .map(|(i, t)| (t.input.track_id.as_str(), i))
        .collect();
    let singer_of = |t: &AnalyzedTrack| -> Result<usize> {
        t.input
            .singer_id
            .as_deref()
            .and_then(|s| label.get(s).copied())
            .ok_or_else(|| Error::Manifest {
                path: corpus.manifest.root.clone(),
                message: format!("vocal {} has no singer in the {split:?} split", t.input.track_id),
            })
    };

    let mono: Vec<(usize, usize, Vec<f32>)> = vocals
        .par_iter()
        .enumerate()
        .flat_map_iter(|(ti, t)| t.segments.iter().map(move |s| (ti, t, s.start)))
        .map(|(ti, t, start)| Ok((singer_of(t)?, ti, segment_input(&t.input.clip, start)?)))
        .collect::<Result<_>>()?;

    let recipes: Vec<_> = mashups
        .recipes
        .iter()
        .filter(|r| track_index.contains_key(r.vocal.track_id.as_str()))
        .collect();
    let mixed: Vec<(usize, usize, Vec<f32>)> = recipes
        .par_iter()
        .map(|r| {
            let ti = track_index[r.vocal.track_id.as_str()];
            let v = vocals[ti];
            let b = corpus.background(&r.background.track_id).ok_or_else(|| Error::Manifest {
                path: corpus.manifest.root.clone(),
                message: format!("recipe refers to unknown background {}", r.background.track_id),
            })?;
            let mix = render_recipe(r, &v.input.clip, &b.input.clip)?;
            Ok((singer_of(v)?, ti, mel_spectrogram(&stft(&mix)?)?.to_f32()))
        })
        .collect::<Result<_>>()?;

    let mut bank = SegmentBank::new(input_len, singers.len());
    for (domain, items) in [(Domain::Monophonic, mono), (Domain::Mixed, mixed)] {
        for (singer, track, features) in items {
            bank.push(TrainItem {
                singer,
                track,
                domain,
                features: Arc::from(features),
            })?;
        }
    }
    Ok(TrainingSet { bank, singers })
}

/// How a whole vocal track is laid over a background: the background is
/// read from `background_start` so that one of its beats coincides with
/// the vocal's first beat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMix {
    pub vocal_id: String,
    pub background_id: String,
    pub background_start: f64,
}

/// Picks, for every vocal of `split`, a background of the same split whose
/// tempo agrees within `tempo_tolerance_bpm` and whose corpus key matches,
/// and a beat-aligned start long enough to cover the vocal.
pub fn plan_track_mixes(
    corpus: &Corpus,
    split: Split,
    tempo_tolerance_bpm: f64,
    seed: u64,
) -> Result<Vec<TrackMix>> {
    let key_of: HashMap<&str, _> = corpus
        .manifest
        .entries
        .iter()
        .map(|e| (e.track_id.as_str(), e.key))
        .collect();
    let bgs = corpus.backgrounds_in(split);
    corpus
        .vocals_in(split)
        .into_iter()
        .map(|v| {
            let id = v.input.track_id.as_str();
            let v0 = v.grid.beat_times.first().copied().unwrap_or(0.0);
            let v_dur = v.input.clip.duration();
            let mut options: Vec<(&str, f64)> = Vec::new();
            for b in &bgs {
                let b_id = b.input.track_id.as_str();
                if (v.tempo() - b.tempo()).abs() > tempo_tolerance_bpm || key_of.get(id) != key_of.get(b_id) {
                    continue;
                }
                let room = b.input.clip.duration() - v_dur;
                options.extend(
                    b.grid
                        .beat_times
                        .iter()
                        .map(|&t| t - v0)
                        .filter(|&s| s >= 0.0 && s <= room)
                        .map(|s| (b_id, s)),
                );
            }
            let mut rng = seed::rng(derive_seed(seed, &["track-mix", id]));
            let &(b_id, start) = options.choose(&mut rng).ok_or(Error::NoMashablePairs {
                failed: 1,
                total: 1,
            })?;
            Ok(TrackMix {
                vocal_id: id.to_string(),
                background_id: b_id.to_string(),
                background_start: start,
            })
        })
        .collect()
}

/// The full-length mix at `snr_db` (RMS over the whole track).
pub fn render_track_mix(plan: &TrackMix, vocal: &AudioClip, background: &AudioClip, snr_db: f64) -> Result<AudioClip> {
    let b = extract_segment(background, plan.background_start, vocal.duration())?;
    let (gv, gb) = mix_gains(vocal, &b, snr_db)?;
    let samples = vocal
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(v, b)| gv * v + gb * b)
        .collect();
    AudioClip::new(samples, vocal.sample_rate)
}

/// One evaluation track in one domain. `activity` always comes from the
/// vocal stem, so the mixed version of a track selects the same segments.
#[derive(Debug, Clone)]
pub struct EvalTrack {
    pub track_id: String,
    pub singer_id: String,
    pub domain: Domain,
    pub clip: AudioClip,
    pub activity: Arc<VoiceActivity>,
}

/// Test-split tracks in both domains.
#[derive(Debug, Clone)]
pub struct EvalCorpus {
    pub singers: Vec<String>,
    pub mono: Vec<EvalTrack>,
    pub mixes: Vec<TrackMix>,
    backgrounds: HashMap<String, AudioClip>,
}

impl EvalCorpus {
    pub fn new(corpus: &Corpus, split: Split, tempo_tolerance_bpm: f64, seed: u64) -> Result<Self> {
        let mixes = plan_track_mixes(corpus, split, tempo_tolerance_bpm, seed)?;
        let mono = corpus
            .vocals_in(split)
            .into_iter()
            .map(|v| {
                Ok(EvalTrack {
                    track_id: v.input.track_id.clone(),
                    singer_id: v.input.singer_id.clone().ok_or_else(|| {
                        Error::MissingTracks {
                            singer: "?".into(),
                            detail: format!("vocal {} has no singer id", v.input.track_id),
                        }
                    })?,
                    domain: Domain::Monophonic,
                    activity: Arc::new(detect_voiced_frames(&v.input.clip)),
                    clip: v.input.clip.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let backgrounds = mixes
            .iter()
            .map(|m| {
                let b = corpus.background(&m.background_id).expect("planned from the corpus");
                (m.background_id.clone(), b.input.clip.clone())
            })
            .collect();
        Ok(EvalCorpus {
            singers: corpus.singers(split),
            mono,
            mixes,
            backgrounds,
        })
    }

    /// Assembles an evaluation corpus from tracks already in memory.
    pub fn from_parts(
        singers: Vec<String>,
        mono: Vec<EvalTrack>,
        mixes: Vec<TrackMix>,
        backgrounds: HashMap<String, AudioClip>,
    ) -> Self {
        EvalCorpus {
            singers,
            mono,
            mixes,
            backgrounds,
        }
    }

    /// Mixed versions of every monophonic track, in the same order.
    pub fn mixed(&self, snr_db: f64) -> Result<Vec<EvalTrack>> {
        self.mono
            .par_iter()
            .map(|t| {
                let plan = self
                    .mixes
                    .iter()
                    .find(|m| m.vocal_id == t.track_id)
                    .ok_or_else(|| Error::MissingTracks {
                        singer: t.singer_id.clone(),
                        detail: format!("no mixed version of {}", t.track_id),
                    })?;
                let bg = &self.backgrounds[&plan.background_id];
                Ok(EvalTrack {
                    domain: Domain::Mixed,
                    clip: render_track_mix(plan, &t.clip, bg, snr_db)?,
                    ..t.clone()
                })
            })
            .collect()
    }

    /// Monophonic tracks (always) plus the mixed versions at `snr_db`.
    pub fn tracks(&self, snr_db: f64) -> Result<Vec<EvalTrack>> {
        let mut all = self.mono.clone();
        all.extend(self.mixed(snr_db)?);
        Ok(all)
    }
}
