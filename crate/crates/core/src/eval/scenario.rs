use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    average_precision, build_singer_models, identify, mean_of, precision_at, recall_at,
    retrieve, MetricsReport, Scenario, TrackVector,
};
use crate::audio::{segment_voiced_ratio, VoiceActivity, SEGMENT_SAMPLES, SEGMENT_SECONDS};
use crate::dataset::{segment_input, EvalCorpus, EvalTrack};
use crate::error::{Error, Result};
use crate::gmm::{gmm_identify, map_adapt, voiced_mfcc, GmmBaseline, MfccSequence};
use crate::mashup::MIN_VOICED_RATIO;
use crate::model::{embed_batch, Domain, ModelBundle};
use crate::seed::{self, derive_seed};

/// Candidate segment starts are this many seconds apart.
pub const SEGMENT_GRID: f64 = 0.5;
pub const MAX_SEGMENTS: usize = 20;

/// Track counts per singer and the cut-off of the retrieval metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub model_tracks: usize,
    pub query_tracks: usize,
    pub k: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            model_tracks: 6,
            query_tracks: 4,
            k: 5,
        }
    }
}

/// Track ids that build singer models and track ids used as queries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProtocolSplit {
    pub model: BTreeSet<String>,
    pub query: BTreeSet<String>,
}

/// Seeded per-singer shuffle; the first `model_tracks` build the model,
/// the next `query_tracks` are queries, any further tracks are unused.
pub fn assign_protocol(tracks: &[EvalTrack], singers: &[String], protocol: &Protocol, seed: u64) -> Result<ProtocolSplit> {
    let mut out = ProtocolSplit::default();
    let need = protocol.model_tracks + protocol.query_tracks;
    for s in singers {
        let mut own: Vec<&str> = tracks
            .iter()
            .filter(|t| &t.singer_id == s && t.domain == Domain::Monophonic)
            .map(|t| t.track_id.as_str())
            .collect();
        own.sort_unstable();
        own.dedup();
        if own.len() < need {
            return Err(Error::MissingTracks {
                singer: s.clone(),
                detail: format!("{} tracks, the protocol needs {need}", own.len()),
            });
        }
        let mut rng = seed::rng(derive_seed(seed, &["protocol", s]));
        let picked: Vec<&str> = own.choose_multiple(&mut rng, need).copied().collect();
        out.model.extend(picked[..protocol.model_tracks].iter().map(|t| t.to_string()));
        out.query.extend(picked[protocol.model_tracks..].iter().map(|t| t.to_string()));
    }
    Ok(out)
}

/// Starts (s) on the 0.5 s grid whose 3 s segment is at least 70% voiced.
pub fn qualifying_starts(n_samples: usize, sample_rate: u32, activity: &VoiceActivity) -> Vec<f64> {
    let sr = sample_rate as f64;
    (0..)
        .map(|i| i as f64 * SEGMENT_GRID)
        .take_while(|s| ((s + SEGMENT_SECONDS) * sr).round() as usize <= n_samples)
        .filter(|s| {
            let first = (s * sr).round() as usize;
            segment_voiced_ratio(activity, first, SEGMENT_SAMPLES) >= MIN_VOICED_RATIO
        })
        .collect()
}

/// Mean embedding of up to 20 seeded qualifying segments, embedded by the
/// bundle's network for the track's domain. The selection depends on the
/// track id and seed only, so both domains of a track use the same starts.
pub fn track_vector(bundle: &ModelBundle<f32>, track: &EvalTrack, seed: u64) -> Result<TrackVector> {
    let starts = qualifying_starts(track.clip.len(), track.clip.sample_rate, &track.activity);
    if starts.is_empty() {
        return Err(Error::NoQualifyingSegment(track.track_id.clone()));
    }
    let mut rng = seed::rng(derive_seed(seed, &["segments", &track.track_id]));
    let mut chosen: Vec<f64> = starts.choose_multiple(&mut rng, MAX_SEGMENTS).copied().collect();
    chosen.sort_by(f64::total_cmp);
    let inputs: Vec<Vec<f32>> = chosen
        .iter()
        .map(|&s| segment_input(&track.clip, s))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let embs = embed_batch(bundle.net_for(track.domain), &refs)?;
    let embs64: Vec<Vec<f64>> = embs.iter().map(|e| e.iter().map(|&x| x as f64).collect()).collect();
    Ok(TrackVector {
        values: mean_of(embs64.iter().map(Vec::as_slice)).expect("at least one segment"),
        track_id: track.track_id.clone(),
        singer_id: track.singer_id.clone(),
        domain: track.domain,
        n_segments: chosen.len(),
    })
}

/// Track vectors for many tracks, in input order.
pub fn embed_tracks(bundle: &ModelBundle<f32>, tracks: &[EvalTrack], seed: u64) -> Result<Vec<TrackVector>> {
    tracks.par_iter().map(|t| track_vector(bundle, t, seed)).collect()
}

/// Identification and retrieval metrics of one scenario over precomputed
/// track vectors. `model`, `snr_db` and `config_hash` are left for the
/// caller to fill in.
pub fn metrics_from_vectors(
    vectors: &[TrackVector],
    split: &ProtocolSplit,
    singers: &[String],
    scenario: Scenario,
    protocol: &Protocol,
    seed: u64,
) -> Result<MetricsReport> {
    let pick = |domain: Domain, ids: &BTreeSet<String>| -> Result<Vec<TrackVector>> {
        let v: Vec<TrackVector> = vectors
            .iter()
            .filter(|t| t.domain == domain && ids.contains(&t.track_id))
            .cloned()
            .collect();
        if v.is_empty() {
            return Err(Error::Empty(match domain {
                Domain::Monophonic => "monophonic track vectors",
                Domain::Mixed => "mixed track vectors",
            }));
        }
        Ok(v)
    };
    let targets = pick(scenario.target_domain(), &split.model)?;
    let queries = pick(scenario.query_domain(), &split.query)?;
    let models = build_singer_models(&targets, singers, protocol.model_tracks)?;
    let rankings: Vec<(String, Vec<String>, Vec<String>)> = queries
        .iter()
        .map(|q| {
            let singers = identify(&q.values, &models)?.into_iter().map(|r| r.0).collect();
            let tracks = retrieve(q, &targets)?
                .into_iter()
                .map(|(t, _)| t.singer_id.clone())
                .collect();
            Ok((q.singer_id.clone(), singers, tracks))
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&rankings, scenario, protocol, seed))
}

/// `(true singer, singers ranked, singer of each retrieved track)` per query.
fn summarize(rankings: &[(String, Vec<String>, Vec<String>)], scenario: Scenario, protocol: &Protocol, seed: u64) -> MetricsReport {
    let n = rankings.len() as f64;
    let (mut top1, mut top5, mut pr, mut r, mut map) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (truth, singers, tracks) in rankings {
        top1 += f64::from(u8::from(singers.first() == Some(truth)));
        top5 += f64::from(u8::from(singers.iter().take(5).any(|s| s == truth)));
        let flags: Vec<bool> = tracks.iter().map(|s| s == truth).collect();
        pr += precision_at(&flags, protocol.k);
        r += recall_at(&flags, protocol.k, protocol.model_tracks);
        map += average_precision(&flags, protocol.model_tracks);
    }
    MetricsReport {
        scenario,
        model: String::new(),
        snr_db: None,
        top1: top1 / n,
        top5: top5 / n,
        pr_at_k: pr / n,
        r_at_k: r / n,
        map: map / n,
        n_queries: rankings.len(),
        seed,
        config_hash: String::new(),
    }
}

fn tracks_for(corpus: &EvalCorpus, scenario: Scenario, snr_db: f64) -> Result<Vec<EvalTrack>> {
    let mut out = Vec::new();
    let domains = [scenario.query_domain(), scenario.target_domain()];
    if domains.contains(&Domain::Monophonic) {
        out.extend(corpus.mono.iter().cloned());
    }
    if domains.contains(&Domain::Mixed) {
        out.extend(corpus.mixed(snr_db)?);
    }
    Ok(out)
}

/// Standard protocol on an evaluation corpus: per singer, model tracks build
/// the singer model (target domain) and query tracks are ranked against
/// the models and against the model tracks of every singer.
pub fn run_scenario(
    bundle: &ModelBundle<f32>,
    corpus: &EvalCorpus,
    scenario: Scenario,
    protocol: &Protocol,
    snr_db: f64,
    seed: u64,
) -> Result<MetricsReport> {
    let split = assign_protocol(&corpus.mono, &corpus.singers, protocol, seed)?;
    let tracks = tracks_for(corpus, scenario, snr_db)?;
    let vectors = embed_tracks(bundle, &tracks, seed)?;
    Ok(MetricsReport {
        model: bundle.mode.to_string(),
        snr_db: Some(snr_db),
        ..metrics_from_vectors(&vectors, &split, &corpus.singers, scenario, protocol, seed)?
    })
}

/// Mix2Mix-style scenarios re-rendered at each SNR. Monophonic track
/// vectors are computed once and reused, so monophonic-only scenarios are
/// identical across the sweep.
pub fn snr_sweep(
    bundle: &ModelBundle<f32>,
    corpus: &EvalCorpus,
    snrs_db: &[f64],
    scenarios: &[Scenario],
    protocol: &Protocol,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    let split = assign_protocol(&corpus.mono, &corpus.singers, protocol, seed)?;
    let mono = embed_tracks(bundle, &corpus.mono, seed)?;
    let needs_mix = scenarios
        .iter()
        .any(|s| s.query_domain() == Domain::Mixed || s.target_domain() == Domain::Mixed);
    let mut out = Vec::new();
    for &snr in snrs_db {
        let mut vectors = mono.clone();
        if needs_mix {
            vectors.extend(embed_tracks(bundle, &corpus.mixed(snr)?, seed)?);
        }
        for &sc in scenarios {
            out.push(MetricsReport {
                model: bundle.mode.to_string(),
                snr_db: Some(snr),
                ..metrics_from_vectors(&vectors, &split, &corpus.singers, sc, protocol, seed)?
            });
        }
    }
    Ok(out)
}

/// The GMM-UBM baseline under the same protocol. Singer models are MAP
/// adapted from the UBM of the target domain; retrieval adapts one model
/// per database track and ranks tracks by the query's likelihood.
pub fn gmm_scenario(
    baseline: &GmmBaseline,
    corpus: &EvalCorpus,
    scenario: Scenario,
    protocol: &Protocol,
    snr_db: f64,
    seed: u64,
) -> Result<MetricsReport> {
    let split = assign_protocol(&corpus.mono, &corpus.singers, protocol, seed)?;
    let tracks = tracks_for(corpus, scenario, snr_db)?;
    let feats: Vec<MfccSequence> = tracks.par_iter().map(|t| voiced_mfcc(&t.clip, &t.activity)).collect::<Result<_>>()?;
    let ubm = baseline.ubm(scenario.target_domain());
    let select = |domain: Domain, ids: &BTreeSet<String>| -> Vec<usize> {
        (0..tracks.len())
            .filter(|&i| tracks[i].domain == domain && ids.contains(&tracks[i].track_id))
            .collect()
    };
    let targets = select(scenario.target_domain(), &split.model);
    let queries = select(scenario.query_domain(), &split.query);
    if targets.is_empty() || queries.is_empty() {
        return Err(Error::Empty("evaluation tracks"));
    }
    let mut by_singer: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in &targets {
        by_singer.entry(&tracks[i].singer_id).or_default().push(i);
    }
    let singer_models = corpus
        .singers
        .iter()
        .map(|s| {
            let own = by_singer.get(s.as_str()).map(Vec::as_slice).unwrap_or_default();
            if own.len() != protocol.model_tracks {
                return Err(Error::MissingTracks {
                    singer: s.clone(),
                    detail: format!("{} model tracks, expected {}", own.len(), protocol.model_tracks),
                });
            }
            map_adapt(ubm, &MfccSequence::concat(own.iter().map(|&i| &feats[i])), baseline.relevance, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let track_models = targets
        .par_iter()
        .map(|&i| map_adapt(ubm, &feats[i], baseline.relevance, &tracks[i].track_id))
        .collect::<Result<Vec<_>>>()?;
    let rankings: Vec<(String, Vec<String>, Vec<String>)> = queries
        .par_iter()
        .map(|&q| {
            let singers = gmm_identify(&feats[q], &singer_models)?.into_iter().map(|r| r.0).collect();
            let singer_of: HashMap<&str, &str> = targets
                .iter()
                .map(|&i| (tracks[i].track_id.as_str(), tracks[i].singer_id.as_str()))
                .collect();
            let ranked = gmm_identify(&feats[q], &track_models)?
                .into_iter()
                .filter(|(id, _)| *id != tracks[q].track_id)
                .map(|(id, _)| singer_of[id.as_str()].to_string())
                .collect();
            Ok((tracks[q].singer_id.clone(), singers, ranked))
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        model: "gmm".into(),
        snr_db: Some(snr_db),
        ..summarize(&rankings, scenario, protocol, seed)
    })
}
