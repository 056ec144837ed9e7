use std::collections::HashMap;
use std::sync::Arc;

use m2mx_core::audio::{detect_voiced_frames, AudioClip, SAMPLE_RATE};
use m2mx_core::dataset::{EvalCorpus, EvalTrack, TrackMix};
use m2mx_core::eval::{
    assign_protocol, average_precision, build_singer_models, export_projection, export_report,
    identify, metrics_from_vectors, precision_at, project_2d, recall_at, retrieve, run_scenario,
    snr_sweep, track_vector, MetricsReport, ProjectionRow, Protocol, ProtocolSplit, Scenario,
    TrackVector, TsneConfig,
};
use m2mx_core::model::{Domain, Geometry, Mode, ModelBundle};
use m2mx_core::seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Definition-level AP: precision at each relevant rank, counted afresh.
fn brute_ap(ranked: &[bool], n_relevant: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..ranked.len() {
        if ranked[r] {
            let hits = ranked[..=r].iter().filter(|&&x| x).count();
            total += hits as f64 / (r + 1) as f64;
        }
    }
    total / n_relevant as f64
}

fn tv(track: &str, singer: &str, domain: Domain, values: Vec<f64>) -> TrackVector {
    TrackVector {
        values,
        track_id: track.into(),
        singer_id: singer.into(),
        domain,
        n_segments: 1,
    }
}

/// Track vectors for `n_singers × n_tracks` tracks in both domains plus
/// the matching protocol split.
fn vector_set(
    n_singers: usize,
    n_tracks: usize,
    protocol: &Protocol,
    mut embed: impl FnMut(usize, usize, Domain) -> Vec<f64>,
) -> (Vec<TrackVector>, ProtocolSplit, Vec<String>) {
    let singers: Vec<String> = (0..n_singers).map(|s| format!("s{s:03}")).collect();
    let mut vectors = Vec::new();
    let mut split = ProtocolSplit::default();
    for (s, name) in singers.iter().enumerate() {
        for t in 0..n_tracks {
            let id = format!("{name}_t{t:02}");
            for d in [Domain::Monophonic, Domain::Mixed] {
                vectors.push(tv(&id, name, d, embed(s, t, d)));
            }
            if t < protocol.model_tracks {
                split.model.insert(id);
            } else if t < protocol.model_tracks + protocol.query_tracks {
                split.query.insert(id);
            }
        }
    }
    (vectors, split, singers)
}

#[test]
fn average_precision_matches_brute_force() {
    let mut rng = seed::rng(2024);
    for _ in 0..1000 {
        let len = rng.random_range(1..60);
        let ranked: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
        let present = ranked.iter().filter(|&&x| x).count();
        let n_rel = present + rng.random_range(0..3);
        if n_rel == 0 {
            continue;
        }
        assert_eq!(average_precision(&ranked, n_rel), brute_ap(&ranked, n_rel));
    }
}

#[test]
fn worked_average_precision_examples() {
    let mut ranked = vec![false; 12];
    for r in [1, 2, 3, 10, 11, 12] {
        ranked[r - 1] = true;
    }
    let want = (1.0 + 1.0 + 1.0 + 4.0 / 10.0 + 5.0 / 11.0 + 6.0 / 12.0) / 6.0;
    assert!((average_precision(&ranked, 6) - want).abs() < 1e-12);
    assert!((average_precision(&ranked, 6) - 0.7258).abs() < 1e-4);
    assert_eq!(average_precision(&[true; 6], 6), 1.0);
    assert_eq!(average_precision(&[false; 20], 6), 0.0);
    assert_eq!(precision_at(&ranked, 5), 0.6);
    assert_eq!(recall_at(&ranked, 5, 6), 0.5);
}

#[test]
fn oracle_embeddings_score_perfectly() {
    let protocol = Protocol::default();
    let (vectors, split, singers) = vector_set(12, 10, &protocol, |s, _, _| {
        let mut v = vec![0.0; 12];
        v[s] = 1.0;
        v
    });
    for scenario in Scenario::ALL {
        let r = metrics_from_vectors(&vectors, &split, &singers, scenario, &protocol, 0).unwrap();
        assert_eq!((r.top1, r.top5, r.pr_at_k, r.map), (1.0, 1.0, 1.0, 1.0), "{scenario}");
        assert!((r.r_at_k - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.n_queries, 12 * 4);
    }
}

#[test]
fn random_embeddings_identify_at_chance() {
    let protocol = Protocol::default();
    let mut total = 0.0;
    let runs = 20;
    for run in 0..runs {
        let mut rng = seed::rng(run);
        let (vectors, split, singers) =
            vector_set(20, 10, &protocol, |_, _, _| (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
        let r = metrics_from_vectors(&vectors, &split, &singers, Scenario::Mono2Mix, &protocol, run).unwrap();
        assert!(r.top1 <= r.top5);
        assert!(((r.pr_at_k * 5.0 * r.n_queries as f64).round() - r.pr_at_k * 5.0 * r.n_queries as f64).abs() < 1e-9);
        total += r.top1;
    }
    let mean = total / runs as f64;
    assert!((mean - 0.05).abs() < 0.02, "mean top-1 {mean}");
}

#[test]
fn many_singers_give_one_model_each() {
    let tracks: Vec<TrackVector> = (0..300)
        .flat_map(|s| (0..6).map(move |t| tv(&format!("{s}_{t}"), &format!("s{s}"), Domain::Monophonic, vec![s as f64, t as f64 + 1.0])))
        .collect();
    let singers: Vec<String> = (0..300).map(|s| format!("s{s}")).collect();
    let models = build_singer_models(&tracks, &singers, 6).unwrap();
    assert_eq!(models.len(), 300);
    assert!(models.iter().all(|m| m.n_tracks == 6));
    assert_eq!(models[7].values, vec![7.0, 3.5]);
    // a singer short of tracks is named in the error
    let err = build_singer_models(&tracks[1..], &singers, 6).unwrap_err();
    assert!(err.to_string().contains("s0"), "{err}");
}

#[test]
fn retrieval_excludes_the_query_and_breaks_ties_by_id() {
    let q = tv("q", "a", Domain::Mixed, vec![1.0, 0.0]);
    let db = vec![
        tv("q", "a", Domain::Mixed, vec![1.0, 0.0]),
        tv("z", "b", Domain::Mixed, vec![2.0, 0.0]),
        tv("m", "c", Domain::Mixed, vec![3.0, 0.0]),
        tv("x", "d", Domain::Mixed, vec![0.0, 1.0]),
    ];
    let ids: Vec<&str> = retrieve(&q, &db).unwrap().iter().map(|(t, _)| t.track_id.as_str()).collect();
    assert_eq!(ids, ["m", "z", "x"]);
    assert!(retrieve(&q, &db[..1]).is_err());
}

/// A tone per singer, distinguishable by pitch; 5 s long so each track has
/// many qualifying segments.
fn tone_track(singer: usize, track: usize, secs: f64) -> AudioClip {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let f = 180.0 * (1.0 + 0.25 * singer as f64) * (1.0 + 0.01 * track as f64);
    AudioClip::new(
        (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                0.3 * (2.0 * std::f64::consts::PI * f * t).sin() + 0.1 * (4.0 * std::f64::consts::PI * f * t).sin()
            })
            .collect(),
        SAMPLE_RATE,
    )
    .unwrap()
}

fn tiny_corpus(n_singers: usize, n_tracks: usize) -> EvalCorpus {
    let mut rng = seed::rng(5);
    let singers: Vec<String> = (0..n_singers).map(|s| format!("s{s}")).collect();
    let mut mono = Vec::new();
    let mut mixes = Vec::new();
    for s in 0..n_singers {
        for t in 0..n_tracks {
            let clip = tone_track(s, t, 5.0);
            let id = format!("s{s}_t{t}");
            mixes.push(TrackMix {
                vocal_id: id.clone(),
                background_id: "bg".into(),
                background_start: 0.25 * t as f64,
            });
            mono.push(EvalTrack {
                track_id: id,
                singer_id: singers[s].clone(),
                domain: Domain::Monophonic,
                activity: Arc::new(detect_voiced_frames(&clip)),
                clip,
            });
        }
    }
    let bg = AudioClip::new((0..SAMPLE_RATE as usize * 8).map(|_| rng.random_range(-0.3..0.3)).collect(), SAMPLE_RATE).unwrap();
    EvalCorpus::from_parts(singers, mono, mixes, HashMap::from([("bg".to_string(), bg)]))
}

fn small_protocol() -> Protocol {
    Protocol {
        model_tracks: 2,
        query_tracks: 1,
        k: 2,
    }
}

#[test]
fn scenarios_are_reproducible_and_sweeps_keep_monophonic_results() {
    let corpus = tiny_corpus(3, 3);
    let bundle = ModelBundle::random(Mode::Cross, &Geometry::standard(), 3).unwrap();
    let p = small_protocol();
    let a = run_scenario(&bundle, &corpus, Scenario::Mono2Mix, &p, 0.0, 9).unwrap();
    let b = run_scenario(&bundle, &corpus, Scenario::Mono2Mix, &p, 0.0, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_queries, 3);

    let sweep = snr_sweep(&bundle, &corpus, &[-10.0, 20.0], &[Scenario::Mono2Mono, Scenario::Mix2Mix], &p, 9).unwrap();
    assert_eq!(sweep.len(), 4);
    let strip = |r: &MetricsReport| MetricsReport {
        snr_db: None,
        ..r.clone()
    };
    assert_eq!(strip(&sweep[0]), strip(&sweep[2]));
    assert_eq!(sweep[0].snr_db, Some(-10.0));
    assert_eq!(sweep[3].scenario, Scenario::Mix2Mix);
}

#[test]
fn identical_segments_average_to_one_embedding() {
    // period 49 samples divides the 0.5 s grid step of 11025 samples
    let n = SAMPLE_RATE as usize * 6;
    let clip = AudioClip::new(
        (0..n).map(|i| 0.4 * (2.0 * std::f64::consts::PI * i as f64 / 49.0).sin()).collect(),
        SAMPLE_RATE,
    )
    .unwrap();
    let track = EvalTrack {
        track_id: "tone".into(),
        singer_id: "s".into(),
        domain: Domain::Monophonic,
        activity: Arc::new(detect_voiced_frames(&clip)),
        clip: clip.clone(),
    };
    let bundle = ModelBundle::random(Mode::Mono, &Geometry::standard(), 1).unwrap();
    let v = track_vector(&bundle, &track, 0).unwrap();
    assert!(v.n_segments > 1);
    let one = AudioClip::new(clip.samples[..SAMPLE_RATE as usize * 3].to_vec(), SAMPLE_RATE).unwrap();
    let single = track_vector(
        &bundle,
        &EvalTrack {
            activity: Arc::new(detect_voiced_frames(&one)),
            clip: one,
            ..track.clone()
        },
        0,
    )
    .unwrap();
    assert_eq!(single.n_segments, 1);
    for (a, b) in v.values.iter().zip(&single.values) {
        assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
    }

    // MONO embeds both domains with the same network; CROSS does not
    let as_mixed = EvalTrack {
        domain: Domain::Mixed,
        ..track.clone()
    };
    assert_eq!(track_vector(&bundle, &as_mixed, 0).unwrap().values, v.values);
    let mut cross = ModelBundle::random(Mode::Cross, &Geometry::standard(), 1).unwrap();
    cross.other_net = Some(m2mx_core::model::SkeletonParams::random(&Geometry::standard(), 2).unwrap());
    assert_ne!(
        track_vector(&cross, &as_mixed, 0).unwrap().values,
        track_vector(&cross, &track, 0).unwrap().values
    );
}

#[test]
fn protocol_split_is_seeded_and_disjoint() {
    let corpus = tiny_corpus(2, 4);
    let p = small_protocol();
    let a = assign_protocol(&corpus.mono, &corpus.singers, &p, 1).unwrap();
    assert_eq!(a, assign_protocol(&corpus.mono, &corpus.singers, &p, 1).unwrap());
    assert_eq!((a.model.len(), a.query.len()), (4, 2));
    assert!(a.model.is_disjoint(&a.query));
    let big = Protocol {
        model_tracks: 4,
        query_tracks: 1,
        k: 2,
    };
    assert!(assign_protocol(&corpus.mono, &corpus.singers, &big, 1).is_err());
}

#[test]
fn tsne_reduces_divergence_and_keeps_duplicates_close() {
    let mut rng = seed::rng(8);
    let mut vectors: Vec<Vec<f64>> = (0..60)
        .map(|i| {
            let c = (i % 3) as f64 * 4.0;
            (0..8).map(|_| c + rng.random_range(-1.0..1.0)).collect()
        })
        .collect();
    vectors.push(vectors[5].clone());
    let cfg = TsneConfig {
        perplexity: 10.0,
        iterations: 400,
        ..TsneConfig::default()
    };
    let r = project_2d(&vectors, &cfg).unwrap();
    assert_eq!(r.points.len(), vectors.len());
    assert!(r.kl.last().unwrap() < &r.kl[0]);
    assert_eq!(r, project_2d(&vectors, &cfg).unwrap());
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut all: Vec<f64> = (0..r.points.len())
        .flat_map(|i| (i + 1..r.points.len()).map(move |j| (i, j)))
        .map(|(i, j)| dist(r.points[i], r.points[j]))
        .collect();
    all.sort_by(f64::total_cmp);
    assert!(dist(r.points[5], r.points[60]) < all[all.len() / 2]);
    assert!(project_2d(&vectors[..10], &cfg).is_err());
}

fn sample_reports() -> Vec<MetricsReport> {
    let mut out = Vec::new();
    for scenario in Scenario::ALL {
        for (i, snr) in [-10.0, 0.0, 20.0].into_iter().enumerate() {
            out.push(MetricsReport {
                scenario,
                model: "cross".into(),
                snr_db: Some(snr),
                top1: 0.1 * i as f64,
                top5: 0.5,
                pr_at_k: 0.2,
                r_at_k: 1.0 / 6.0,
                map: 0.7258,
                n_queries: 40,
                seed: 3,
                config_hash: "abc".into(),
            });
        }
    }
    out
}

#[test]
fn report_export_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b/b.csv"));
    export_report(&sample_reports(), &a).unwrap();
    export_report(&sample_reports(), &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[0], "scenario,model,snr_db,top1,top5,pr5,r5,map,n_queries,seed,config_hash");
    assert!(lines[1].starts_with("mono2mono,cross,-10,0,"));
    assert!(export_report(&[], &dir.path().join("c.csv")).is_err());

    let rows = vec![ProjectionRow {
        track_id: "t".into(),
        singer_id: "s".into(),
        domain: Domain::Mixed,
        x: 0.5,
        y: -1.0,
    }];
    let p = dir.path().join("p.csv");
    export_projection(&rows, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "track_id,singer_id,domain,x,y\nt,s,mixed,0.5,-1.0\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rankings_ignore_positive_rescaling(seed in 0u64..10_000, scale in 0.01f64..100.0, which in 0usize..8) {
        let mut rng = seed::rng(seed);
        let mut db: Vec<TrackVector> = (0..8)
            .map(|i| tv(&format!("t{i}"), &format!("s{}", i % 4), Domain::Mixed, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let q = tv("q", "s0", Domain::Monophonic, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let order = |db: &[TrackVector]| retrieve(&q, db).unwrap().iter().map(|(t, _)| t.track_id.clone()).collect::<Vec<_>>();
        let singers: Vec<String> = (0..4).map(|s| format!("s{s}")).collect();
        let before = order(&db);
        let models = build_singer_models(&db, &singers, 2).unwrap();
        let ident = identify(&q.values, &models).unwrap();
        db[which].values.iter_mut().for_each(|x| *x *= scale);
        prop_assert_eq!(before, order(&db));
        let mut scaled_q = q.values.clone();
        scaled_q.iter_mut().for_each(|x| *x *= scale);
        let again = identify(&scaled_q, &models).unwrap();
        prop_assert_eq!(
            ident.iter().map(|r| &r.0).collect::<Vec<_>>(),
            again.iter().map(|r| &r.0).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ap_is_one_only_when_relevant_items_lead(n_rel in 1usize..8, extra in 0usize..8, seed in 0u64..1000) {
        let mut ranked: Vec<bool> = std::iter::repeat_n(true, n_rel).chain(std::iter::repeat_n(false, extra)).collect();
        prop_assert_eq!(average_precision(&ranked, n_rel), 1.0);
        ranked.shuffle(&mut seed::rng(seed));
        let ap = average_precision(&ranked, n_rel);
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert_eq!(ap == 1.0, ranked[..n_rel].iter().all(|&r| r));
    }
}
