use m2mx_core::audio::{rms, extract_segment, AudioClip, Mode, SEGMENT_SAMPLES, SEGMENT_SECONDS};
use m2mx_core::mashup::{
    analyze_background, analyze_vocal, check_mashability, describe_segment, generate_dataset,
    render_recipe, verify_recipe, AnalyzedTrack, MashupConfig, MashupManifest, TrackInput,
    MIN_VOICED_RATIO,
};
use m2mx_core::synth::{
    gen_singer, random_melody, render_background, render_vocal, BackgroundProfile, MusicalKey,
};
use m2mx_core::Error;

const TEMPO: f64 = 102.0;

fn vocal(singer: u64, track: u64, key: MusicalKey) -> AnalyzedTrack {
    let p = gen_singer(singer);
    let m = random_melody(key, p.pitch_base, 8, 10 * singer + track);
    analyze_vocal(TrackInput {
        track_id: format!("v{singer}_{track}"),
        singer_id: Some(format!("singer{singer}")),
        split: None,
        clip: render_vocal(&p, &m, TEMPO, key).unwrap(),
    })
    .unwrap()
}

fn background(i: u64, key: MusicalKey) -> AnalyzedTrack {
    analyze_background(TrackInput {
        track_id: format!("bg{i}"),
        singer_id: None,
        split: None,
        clip: render_background(
            &BackgroundProfile {
                tempo_bpm: TEMPO,
                key,
                instrumentation_seed: i,
            },
            16.0,
        )
        .unwrap(),
    })
    .unwrap()
}

fn fixture() -> (Vec<AnalyzedTrack>, Vec<AnalyzedTrack>) {
    let key = MusicalKey::new(2, Mode::Major).unwrap();
    let vocals = (0..2).flat_map(|s| (0..2).map(move |t| (s, t))).map(|(s, t)| vocal(s, t, key)).collect();
    let bgs = (0..3).map(|i| background(i, key)).collect();
    (vocals, bgs)
}

#[test]
fn generated_recipes_hold_every_contract() {
    let (vocals, bgs) = fixture();
    let cfg = MashupConfig {
        pairs_per_vocal_segment: 2,
        seed: 3,
        ..MashupConfig::default()
    };
    let manifest = generate_dataset(&vocals, &bgs, &cfg).unwrap();
    assert!(!manifest.recipes.is_empty());
    assert!(2 * manifest.header.unpaired_segments <= manifest.header.vocal_segments);

    let find = |pool: &[AnalyzedTrack], id: &str| -> AnalyzedTrack {
        pool.iter().find(|t| t.input.track_id == id).unwrap().clone()
    };
    for r in &manifest.recipes {
        assert_eq!(r.vocal.duration, SEGMENT_SECONDS);
        assert!(r.vocal.voiced_ratio.unwrap() >= MIN_VOICED_RATIO);
        assert!(r.vocal_gain > 0.0 && r.background_gain > 0.0);
        assert!(check_mashability(&r.vocal, &r.background, cfg.tempo_tolerance_bpm));

        let v = find(&vocals, &r.vocal.track_id);
        let b = find(&bgs, &r.background.track_id);
        // offset is one of the background's beats (well inside half a hop)
        assert!(b.grid.beat_times.iter().any(|&t| (t - r.mix_offset).abs() <= 0.0116));
        assert!(verify_recipe(r, &v.input.clip, &b.input.clip, cfg.tempo_tolerance_bpm).unwrap());

        let mix = render_recipe(r, &v.input.clip, &b.input.clip).unwrap();
        assert_eq!(mix.len(), SEGMENT_SAMPLES);
        assert_eq!(mix, render_recipe(r, &v.input.clip, &b.input.clip).unwrap());

        // stored gains reproduce the rendered mix and the SNR target
        let vs = extract_segment(&v.input.clip, r.vocal.start, SEGMENT_SECONDS).unwrap();
        let bs = extract_segment(&b.input.clip, r.mix_offset, SEGMENT_SECONDS).unwrap();
        for i in (0..SEGMENT_SAMPLES).step_by(101) {
            let want = r.vocal_gain * vs.samples[i] + r.background_gain * bs.samples[i];
            assert!((mix.samples[i] - want).abs() < 1e-12);
        }
        let snr = 20.0
            * ((r.vocal_gain * rms(&vs).unwrap()) / (r.background_gain * rms(&bs).unwrap())).log10();
        assert!((snr - r.target_snr_db).abs() <= 0.1, "{snr}");
    }

    // one song spreads over several backgrounds when it has the segments
    let mut per_song: std::collections::HashMap<&str, std::collections::HashSet<&str>> = Default::default();
    for r in &manifest.recipes {
        per_song
            .entry(&r.vocal.track_id)
            .or_default()
            .insert(&r.background.track_id);
    }
    assert!(per_song.values().any(|bgs| bgs.len() > 1));
}

#[test]
fn same_seed_gives_byte_identical_manifests() {
    let (vocals, bgs) = fixture();
    let cfg = MashupConfig {
        seed: 11,
        ..MashupConfig::default()
    };
    let a = generate_dataset(&vocals, &bgs, &cfg).unwrap();
    let b = generate_dataset(&vocals, &bgs, &cfg).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mashups.jsonl");
    a.save(&path).unwrap();
    let back = MashupManifest::load(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), a.to_jsonl().unwrap());
}

#[test]
fn disjoint_keys_fail_with_advice() {
    let (vocals, _) = fixture();
    // Ab minor backgrounds under D major vocals: local keys almost never agree
    let far = MusicalKey::new(8, Mode::Minor).unwrap();
    let bgs: Vec<AnalyzedTrack> = (0..2).map(|i| background(i, far)).collect();
    let err = generate_dataset(&vocals, &bgs, &MashupConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NoMashablePairs { .. }), "{err}");
    assert!(err.to_string().contains("tempo tolerance"));
}

#[test]
fn mashability_ignores_background_gain() {
    let key = MusicalKey::new(9, Mode::Minor).unwrap();
    let b = background(5, key);
    let scaled = AudioClip::new(b.input.clip.samples.iter().map(|s| 0.13 * s).collect(), b.input.clip.sample_rate).unwrap();
    let b2 = analyze_background(TrackInput {
        clip: scaled,
        ..b.input.clone()
    })
    .unwrap();
    assert_eq!(b.grid.beat_times.len(), b2.grid.beat_times.len());
    // the log floor makes analysis only nearly gain-free; decisions are exact
    assert!((b.tempo() - b2.tempo()).abs() < 0.01);
    let v = vocal(0, 0, key);
    for (s1, s2) in b.segments.iter().zip(&b2.segments) {
        assert_eq!(s1.key.tonic, s2.key.tonic);
        assert_eq!(s1.key.mode, s2.key.mode);
        for vs in &v.segments {
            assert_eq!(check_mashability(vs, s1, 2.0), check_mashability(vs, s2, 2.0));
        }
    }
    // a segment described twice is described identically
    let d1 = describe_segment(&b.input.clip, "x", None, b.segments[0].start, b.tempo(), None).unwrap();
    assert_eq!(d1.key, b.segments[0].key);
}
