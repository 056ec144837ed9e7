use m2mx_core::audio::{
    chromagram, detect_voiced_frames, estimate_key, estimate_tempo_and_beats, mel_spectrogram,
    stft, AudioClip, Mode,
};
use m2mx_core::synth::{
    build_corpus, gen_singer, random_melody, render_background, render_vocal, scale_melody,
    singer_roster, BackgroundProfile, CorpusConfig, CorpusManifest, MusicalKey, Role, Split,
    CORPUS_MANIFEST,
};

fn key_of(clip: &AudioClip) -> (u8, Mode) {
    let k = estimate_key(&chromagram(&stft(clip).unwrap())).unwrap();
    (k.tonic, k.mode)
}

fn all_keys() -> Vec<MusicalKey> {
    (0..12u8)
        .flat_map(|t| [Mode::Major, Mode::Minor].map(|m| MusicalKey::new(t, m).unwrap()))
        .collect()
}

#[test]
fn rendered_scales_recover_their_key() {
    let mut hits = 0;
    for (i, key) in all_keys().into_iter().enumerate() {
        let singer = gen_singer(40 + i as u64);
        let clip = render_vocal(&singer, &scale_melody(key, singer.pitch_base), 100.0, key).unwrap();
        hits += (key_of(&clip) == (key.tonic, key.mode)) as usize;
    }
    assert!(hits >= 23, "{hits}/24 scales");
}

#[test]
fn vocal_key_matches_request() {
    let (mut hits, mut n) = (0, 0);
    for (i, key) in all_keys().into_iter().enumerate() {
        for r in 0..3u64 {
            let singer = gen_singer(1000 + 3 * i as u64 + r);
            let melody = random_melody(key, singer.pitch_base, 8, 77 + 13 * r + i as u64);
            let clip = render_vocal(&singer, &melody, 96.0 + 6.0 * r as f64, key).unwrap();
            hits += (key_of(&clip) == (key.tonic, key.mode)) as usize;
            n += 1;
        }
    }
    assert!(hits as f64 >= 0.9 * n as f64, "{hits}/{n}");
}

#[test]
fn background_key_matches_request() {
    let (mut hits, mut n) = (0, 0);
    for (i, key) in all_keys().into_iter().enumerate() {
        for s in 0..2u64 {
            let clip = render_background(
                &BackgroundProfile {
                    tempo_bpm: 84.0 + 6.0 * (i % 7) as f64,
                    key,
                    instrumentation_seed: 10 * i as u64 + s,
                },
                12.0,
            )
            .unwrap();
            hits += (key_of(&clip) == (key.tonic, key.mode)) as usize;
            n += 1;
        }
    }
    assert!(hits as f64 >= 0.9 * n as f64, "{hits}/{n}");
}

#[test]
fn g_major_at_120_bpm() {
    let key = MusicalKey::new(7, Mode::Major).unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let clip = render_background(
            &BackgroundProfile {
                tempo_bpm: 120.0,
                key,
                instrumentation_seed: seed,
            },
            10.0,
        )
        .unwrap();
        let grid = estimate_tempo_and_beats(&clip).unwrap();
        assert!((grid.tempo_bpm - 120.0).abs() <= 2.0, "seed {seed}: {}", grid.tempo_bpm);
        hits += (key_of(&clip) == (7, Mode::Major)) as usize;
    }
    assert!(hits >= 9, "{hits}/10");
}

#[test]
fn background_tempo_across_the_corpus_grid() {
    for i in 0..7 {
        for offset in [0.0, 3.0] {
            let tempo = 84.0 + 6.0 * i as f64 + offset;
            let clip = render_background(
                &BackgroundProfile {
                    tempo_bpm: tempo,
                    key: MusicalKey::new(i as u8, Mode::Minor).unwrap(),
                    instrumentation_seed: i,
                },
                12.0,
            )
            .unwrap();
            let got = estimate_tempo_and_beats(&clip).unwrap().tempo_bpm;
            assert!((got - tempo).abs() <= 2.0, "{tempo} → {got}");
        }
    }
}

#[test]
fn vocal_tempo_across_the_corpus_grid() {
    let (mut hits, mut n) = (0, 0);
    for i in 0..7 {
        for r in 0..4u64 {
            let tempo = 84.0 + 6.0 * i as f64 + 3.0 * (r % 2) as f64;
            let key = MusicalKey::new((3 * i as u64 + r) as u8 % 12, Mode::Major).unwrap();
            let singer = gen_singer(500 + 4 * i as u64 + r);
            let melody = random_melody(key, singer.pitch_base, 8, 900 + r + 50 * i as u64);
            let clip = render_vocal(&singer, &melody, tempo, key).unwrap();
            let got = estimate_tempo_and_beats(&clip).unwrap().tempo_bpm;
            hits += ((got - tempo).abs() <= 2.0) as usize;
            n += 1;
        }
    }
    assert!(hits as f64 >= 0.9 * n as f64, "{hits}/{n}");
}

#[test]
fn vocals_are_mostly_voiced_but_not_entirely() {
    for s in 0..8 {
        let singer = gen_singer(s);
        let key = MusicalKey::new((s % 12) as u8, Mode::Minor).unwrap();
        let melody = random_melody(key, singer.pitch_base, 6, s);
        let clip = render_vocal(&singer, &melody, 100.0, key).unwrap();
        let r = detect_voiced_frames(&clip).voiced_ratio;
        assert!((0.5..1.0).contains(&r), "singer {s}: voiced ratio {r}");
    }
}

fn mean_mel(clip: &AudioClip) -> Vec<f64> {
    let mel = mel_spectrogram(&stft(clip).unwrap()).unwrap();
    let mut acc = vec![0.0; mel.n_mels];
    for t in 0..mel.n_frames {
        acc.iter_mut().zip(mel.frame(t)).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= mel.n_frames as f64);
    acc
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Leave-one-track-out nearest-centroid identification on average mel
/// spectra, five singers at a time.
#[test]
fn singers_are_identifiable_from_average_spectra() {
    const TRACKS: usize = 4;
    for group in 0..5u64 {
        let singers = singer_roster(5, 100 + group);
        let feats: Vec<Vec<Vec<f64>>> = singers
            .iter()
            .enumerate()
            .map(|(si, p)| {
                (0..TRACKS)
                    .map(|t| {
                        let key = MusicalKey::new(
                            ((5 * si + 7 * t) % 12) as u8,
                            if t % 2 == 0 { Mode::Major } else { Mode::Minor },
                        )
                        .unwrap();
                        let m = random_melody(key, p.pitch_base, 4, group * 100 + (si * TRACKS + t) as u64);
                        mean_mel(&render_vocal(p, &m, 90.0 + 6.0 * t as f64, key).unwrap())
                    })
                    .collect()
            })
            .collect();
        let mut correct = 0;
        for si in 0..singers.len() {
            for t in 0..TRACKS {
                let centroid = |sj: usize| -> Vec<f64> {
                    let others: Vec<&Vec<f64>> = (0..TRACKS)
                        .filter(|&u| !(sj == si && u == t))
                        .map(|u| &feats[sj][u])
                        .collect();
                    let mut c = vec![0.0; others[0].len()];
                    for f in &others {
                        c.iter_mut().zip(f.iter()).for_each(|(a, v)| *a += v);
                    }
                    c.iter_mut().for_each(|a| *a /= others.len() as f64);
                    c
                };
                let guess = (0..singers.len())
                    .min_by(|&a, &b| {
                        dist2(&feats[si][t], &centroid(a)).total_cmp(&dist2(&feats[si][t], &centroid(b)))
                    })
                    .unwrap();
                correct += (guess == si) as usize;
            }
        }
        let acc = correct as f64 / (singers.len() * TRACKS) as f64;
        assert!(acc >= 0.8, "group {group}: accuracy {acc}");
    }
}

#[test]
fn corpus_layout_split_and_determinism() {
    let cfg = CorpusConfig {
        n_singers: 3,
        tracks_per_singer: 2,
        seed: 7,
        vocal_seconds: 6.0,
        background_seconds: 6.0,
        n_styles: 2,
        backgrounds_per_style: 1,
        ..CorpusConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build_corpus(&cfg, a.path()).unwrap();
    let mb = build_corpus(&cfg, &b.path().join("nested/out")).unwrap();
    assert_eq!(ma.hash().unwrap(), mb.hash().unwrap());

    assert_eq!(ma.vocals().count(), 6);
    assert_eq!(ma.backgrounds().count(), 4);
    let train = ma.singers(Split::Train);
    let test = ma.singers(Split::Test);
    assert_eq!((train.len(), test.len()), (2, 1));
    assert!(train.iter().all(|s| !test.contains(s)));

    let loaded = CorpusManifest::load(&a.path().join(CORPUS_MANIFEST)).unwrap();
    assert_eq!(loaded.entries, ma.entries);
    for e in &loaded.entries {
        let path = loaded.resolve(e);
        assert!(path.exists(), "{}", path.display());
        assert_eq!(e.singer_id.is_some(), e.role == Role::Vocal);
    }
    // every vocal has a background sharing its tempo and key in its split
    for v in loaded.vocals() {
        assert!(loaded
            .backgrounds()
            .any(|b| b.split == v.split && b.tempo == v.tempo && b.key == v.key));
    }
}
