//! Singer identification, query-by-singer retrieval, the three test
//! scenarios, SNR sweeps and 2-D projection.

mod report;
mod scenario;
mod tsne;

use serde::{Deserialize, Serialize};

pub use report::{export_projection, export_report, ProjectionRow};
pub use scenario::{
    assign_protocol, embed_tracks, gmm_scenario, metrics_from_vectors, qualifying_starts,
    run_scenario, snr_sweep, track_vector, Protocol, ProtocolSplit, MAX_SEGMENTS, SEGMENT_GRID,
};
pub use tsne::{project_2d, TsneConfig, TsneResult};

use crate::error::{Error, Result};
use crate::model::{loss::cosine, Domain};

/// Mean of up to 20 segment embeddings of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackVector {
    pub values: Vec<f64>,
    pub track_id: String,
    pub singer_id: String,
    pub domain: Domain,
    pub n_segments: usize,
}

/// Mean of a singer's model-track vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SingerModel {
    pub values: Vec<f64>,
    pub singer_id: String,
    pub n_tracks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    Mono2Mono,
    Mix2Mix,
    Mono2Mix,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Mono2Mono, Scenario::Mix2Mix, Scenario::Mono2Mix];

    pub fn query_domain(self) -> Domain {
        match self {
            Scenario::Mix2Mix => Domain::Mixed,
            _ => Domain::Monophonic,
        }
    }

    pub fn target_domain(self) -> Domain {
        match self {
            Scenario::Mono2Mono => Domain::Monophonic,
            _ => Domain::Mixed,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Mono2Mono => "mono2mono",
            Scenario::Mix2Mix => "mix2mix",
            Scenario::Mono2Mix => "mono2mix",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?} (mono2mono|mix2mix|mono2mix)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    /// Which system produced the ranking: mono, mixed, cross, gmm, ...
    pub model: String,
    pub snr_db: Option<f64>,
    pub top1: f64,
    pub top5: f64,
    pub pr_at_k: f64,
    pub r_at_k: f64,
    pub map: f64,
    pub n_queries: usize,
    pub seed: u64,
    pub config_hash: String,
}

fn mean_of<'a>(vs: impl IntoIterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for v in vs {
        match acc.as_mut() {
            None => acc = Some(v.to_vec()),
            Some(a) => a.iter_mut().zip(v).for_each(|(a, b)| *a += b),
        }
        n += 1;
    }
    acc.map(|mut a| {
        a.iter_mut().for_each(|x| *x /= n as f64);
        a
    })
}

/// One model per singer in `singers`, averaging exactly `per_singer`
/// track vectors each.
pub fn build_singer_models(tracks: &[TrackVector], singers: &[String], per_singer: usize) -> Result<Vec<SingerModel>> {
    singers
        .iter()
        .map(|s| {
            let mut own: Vec<&TrackVector> = tracks.iter().filter(|t| &t.singer_id == s).collect();
            if own.len() != per_singer {
                return Err(Error::MissingTracks {
                    singer: s.clone(),
                    detail: format!("{} model tracks, expected {per_singer}", own.len()),
                });
            }
            // summation order fixed by track id, so the model is order-free
            own.sort_by(|a, b| a.track_id.cmp(&b.track_id));
            Ok(SingerModel {
                values: mean_of(own.iter().map(|t| t.values.as_slice())).expect("per_singer ≥ 1"),
                singer_id: s.clone(),
                n_tracks: own.len(),
            })
        })
        .collect()
}

/// Singers by descending cosine similarity; ties by singer id.
pub fn identify(query: &[f64], models: &[SingerModel]) -> Result<Vec<(String, f64)>> {
    if models.is_empty() {
        return Err(Error::Empty("singer models"));
    }
    let mut scored: Vec<(String, f64)> = models
        .iter()
        .map(|m| Ok((m.singer_id.clone(), cosine(query, &m.values)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

/// Database tracks other than the query's own, by descending cosine
/// similarity; ties by track id.
pub fn retrieve<'a>(query: &TrackVector, database: &'a [TrackVector]) -> Result<Vec<(&'a TrackVector, f64)>> {
    let mut scored: Vec<(&TrackVector, f64)> = database
        .iter()
        .filter(|t| t.track_id != query.track_id)
        .map(|t| Ok((t, cosine(&query.values, &t.values)?)))
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Err(Error::Empty("retrieval database"));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.track_id.cmp(&b.0.track_id)));
    Ok(scored)
}

/// Mean over all `n_relevant` relevant items of the precision at their
/// rank; relevant items missing from `ranked` contribute zero.
pub fn average_precision(ranked: &[bool], n_relevant: usize) -> f64 {
    assert!(n_relevant >= 1, "average precision needs a relevant item");
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / n_relevant as f64
}

/// Relevant items among the first `k`, over `k`.
pub fn precision_at(ranked: &[bool], k: usize) -> f64 {
    ranked.iter().take(k).filter(|&&r| r).count() as f64 / k as f64
}

/// Relevant items among the first `k`, over all relevant items.
pub fn recall_at(ranked: &[bool], k: usize, n_relevant: usize) -> f64 {
    ranked.iter().take(k).filter(|&&r| r).count() as f64 / n_relevant as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(id: &str, singer: &str, values: Vec<f64>) -> TrackVector {
        TrackVector {
            values,
            track_id: id.into(),
            singer_id: singer.into(),
            domain: Domain::Monophonic,
            n_segments: 1,
        }
    }

    #[test]
    fn worked_average_precision() {
        let mut flags = vec![false; 12];
        for r in [1, 2, 3, 10, 11, 12] {
            flags[r - 1] = true;
        }
        let ap = average_precision(&flags, 6);
        let want = (1.0 + 1.0 + 1.0 + 4.0 / 10.0 + 5.0 / 11.0 + 6.0 / 12.0) / 6.0;
        assert!((ap - want).abs() < 1e-15);
        assert!((ap - 0.7258).abs() < 1e-4);
        assert_eq!(average_precision(&[true; 6], 6), 1.0);
        assert_eq!(average_precision(&[false; 9], 6), 0.0);
    }

    #[test]
    fn precision_and_recall_at_five() {
        let r = [true, false, true, true, false, true];
        assert_eq!(precision_at(&r, 5), 0.6);
        assert_eq!(recall_at(&r, 5, 6), 0.5);
    }

    #[test]
    fn identify_ties_and_errors() {
        let m = |s: &str, v: Vec<f64>| SingerModel {
            values: v,
            singer_id: s.into(),
            n_tracks: 1,
        };
        let models = vec![m("b", vec![1.0, 0.0]), m("a", vec![1.0, 0.0]), m("c", vec![0.0, 1.0])];
        let r = identify(&[2.0, 0.0], &models).unwrap();
        assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(r[0].1, 1.0);
        assert!(matches!(identify(&[0.0, 0.0], &models), Err(Error::ZeroVector)));
        assert!(identify(&[1.0, 0.0], &[]).is_err());
    }

    #[test]
    fn retrieval_excludes_the_query() {
        let db = vec![
            tv("q", "s1", vec![1.0, 0.0]),
            tv("x", "s2", vec![1.0, 0.1]),
            tv("y", "s1", vec![1.0, 0.0]),
        ];
        let r = retrieve(&db[0], &db).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].0.track_id, "y");
        assert!(retrieve(&db[0], &db[..1]).is_err());
    }

    #[test]
    fn singer_models_need_their_tracks() {
        let tracks: Vec<TrackVector> = (0..6).map(|i| tv(&format!("t{i}"), "s", vec![1.0, 2.0])).collect();
        let models = build_singer_models(&tracks, &["s".into()], 6).unwrap();
        assert_eq!(models[0].values, vec![1.0, 2.0]);
        assert_eq!(models[0].n_tracks, 6);
        let err = build_singer_models(&tracks[..5], &["s".into()], 6).unwrap_err();
        assert!(err.to_string().contains("singer s"), "{err}");
    }

    #[test]
    fn scenario_domains() {
        assert_eq!(Scenario::Mono2Mix.query_domain(), Domain::Monophonic);
        assert_eq!(Scenario::Mono2Mix.target_domain(), Domain::Mixed);
        assert_eq!("MIX2MIX".parse::<Scenario>().unwrap(), Scenario::Mix2Mix);
        assert!("mix2mono".parse::<Scenario>().is_err());
    }
}
