use std::sync::Arc;

use m2mx_core::audio::{rms, AudioClip, SAMPLE_RATE};
use m2mx_core::dataset::{build_training_set, plan_track_mixes, render_track_mix, Corpus, EvalCorpus, TrackMix};
use m2mx_core::mashup::{generate_dataset, MashupConfig};
use m2mx_core::model::{Domain, Geometry};
use m2mx_core::synth::{build_corpus, CorpusConfig, Split};

fn small_corpus(dir: &std::path::Path) -> Corpus {
    let cfg = CorpusConfig {
        n_singers: 4,
        tracks_per_singer: 3,
        test_singers: Some(2),
        seed: 11,
        vocal_seconds: 8.0,
        background_seconds: 16.0,
        n_styles: 2,
        backgrounds_per_style: 1,
    };
    Corpus::load(build_corpus(&cfg, dir).unwrap()).unwrap()
}

#[test]
fn corpus_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    assert_eq!(corpus.vocals_in(Split::Train).len(), 6);
    assert_eq!(corpus.singers(Split::Test).len(), 2);

    // whole-track mixes honour split, tempo, key and length
    for split in [Split::Train, Split::Test] {
        let plans = plan_track_mixes(&corpus, split, 2.0, 3).unwrap();
        assert_eq!(plans, plan_track_mixes(&corpus, split, 2.0, 3).unwrap());
        let vocals = corpus.vocals_in(split);
        assert_eq!(plans.len(), vocals.len());
        for (p, v) in plans.iter().zip(&vocals) {
            assert_eq!(p.vocal_id, v.input.track_id);
            let b = corpus.background(&p.background_id).unwrap();
            let entry = |id: &str| corpus.manifest.entries.iter().find(|e| e.track_id == id).unwrap();
            assert_eq!(entry(&p.background_id).split, split);
            assert_eq!(entry(&p.background_id).key, entry(&p.vocal_id).key);
            assert!((b.tempo() - v.tempo()).abs() <= 2.0);
            assert!(p.background_start >= 0.0);
            assert!(p.background_start + v.input.clip.duration() <= b.input.clip.duration() + 1e-9);
        }
    }

    // evaluation tracks: mixed versions in monophonic order, sharing activity
    let eval = EvalCorpus::new(&corpus, Split::Test, 2.0, 3).unwrap();
    let mixed = eval.mixed(5.0).unwrap();
    assert_eq!(mixed.len(), eval.mono.len());
    for (m, v) in mixed.iter().zip(&eval.mono) {
        assert_eq!((m.track_id.as_str(), m.domain, v.domain), (v.track_id.as_str(), Domain::Mixed, Domain::Monophonic));
        assert!(Arc::ptr_eq(&m.activity, &v.activity));
        assert_eq!(m.clip.len(), v.clip.len());
    }
    assert_eq!(eval.tracks(5.0).unwrap().len(), 2 * eval.mono.len());
    assert_eq!(eval.mixed(5.0).unwrap()[0].clip, mixed[0].clip);

    // training bank: every train segment plus one item per recipe
    let vocals = corpus.vocals.clone();
    let mashups = generate_dataset(&vocals, &corpus.backgrounds, &MashupConfig::default()).unwrap();
    let set = build_training_set(&corpus, &mashups, Split::Train, Geometry::standard().input_len()).unwrap();
    assert_eq!(set.singers, corpus.singers(Split::Train));
    let train_ids: Vec<&str> = corpus.vocals_in(Split::Train).iter().map(|t| t.input.track_id.as_str()).collect();
    let n_segments: usize = corpus.vocals_in(Split::Train).iter().map(|t| t.segments.len()).sum();
    let n_recipes = mashups.recipes.iter().filter(|r| train_ids.contains(&r.vocal.track_id.as_str())).count();
    let items = set.bank.items();
    assert_eq!(items.iter().filter(|i| i.domain == Domain::Monophonic).count(), n_segments);
    assert_eq!(items.iter().filter(|i| i.domain == Domain::Mixed).count(), n_recipes);
    assert!(items.iter().all(|i| i.track < train_ids.len() && i.singer < set.singers.len()));
    assert!(items.iter().all(|i| i.features.len() == Geometry::standard().input_len()));
}

#[test]
fn track_mix_hits_the_requested_snr() {
    let tone = |f: f64, a: f64, secs: f64| {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        AudioClip::new(
            (0..n).map(|i| a * (2.0 * std::f64::consts::PI * f * i as f64 / SAMPLE_RATE as f64).sin()).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    };
    let vocal = tone(440.0, 0.3, 4.0);
    let bg = tone(97.0, 0.5, 6.0);
    let plan = TrackMix {
        vocal_id: "v".into(),
        background_id: "b".into(),
        background_start: 1.0,
    };
    for snr in [-10.0, 0.0, 10.0, 20.0] {
        let mix = render_track_mix(&plan, &vocal, &bg, snr).unwrap();
        assert_eq!(mix.len(), vocal.len());
        // recover the two gains by least squares against the known sources
        let b = &bg.samples[SAMPLE_RATE as usize..SAMPLE_RATE as usize + vocal.len()];
        let (vv, bb, vb) = (
            vocal.samples.iter().map(|x| x * x).sum::<f64>(),
            b.iter().map(|x| x * x).sum::<f64>(),
            vocal.samples.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
        );
        let (mv, mb) = (
            mix.samples.iter().zip(&vocal.samples).map(|(m, v)| m * v).sum::<f64>(),
            mix.samples.iter().zip(b).map(|(m, y)| m * y).sum::<f64>(),
        );
        let det = vv * bb - vb * vb;
        let gv = (mv * bb - mb * vb) / det;
        let gb = (mb * vv - mv * vb) / det;
        let got = 20.0 * (gv.abs() * rms(&vocal).unwrap() / (gb.abs() * (bb / b.len() as f64).sqrt())).log10();
        assert!((got - snr).abs() < 0.1, "{snr}: {got}");
    }
    let late = TrackMix {
        background_start: 3.0,
        ..plan
    };
    assert!(render_track_mix(&late, &vocal, &bg, 0.0).is_err());
}
