use std::path::{Path, PathBuf};

use m2mx_core::audio::write_wav;
use m2mx_core::dataset::{build_training_set, Corpus, EvalCorpus};
use m2mx_core::eval::{
    embed_tracks, export_projection, export_report, gmm_scenario, project_2d, snr_sweep, MetricsReport,
    ProjectionRow, Protocol, Scenario, TsneConfig,
};
use m2mx_core::gmm::GmmBaseline;
use m2mx_core::mashup::{generate_dataset, render_recipe, MashupConfig, MashupManifest};
use m2mx_core::model::{load_checkpoint, save_checkpoint, train_metric, Domain, Mode, ModelBundle, TrainState};
use m2mx_core::pipeline::{initial_bundle, train_gmm_baseline, GmmPlan, TrainPlan};
use m2mx_core::synth::{build_corpus, CorpusConfig, CorpusManifest, Split};
use m2mx_core::Error;

use crate::config::{ResolvedConfig, Settings};
use crate::{CliError, EvalArgs, MashupArgs, MixArgs, ProjectArgs, SynthArgs, TrainArgs};

fn announce(cfg: &ResolvedConfig, dir: &Path) {
    println!("config hash: {}", cfg.hash());
    println!("run dir: {}", dir.display());
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    Ok(Corpus::load(CorpusManifest::load(path)?)?)
}

pub fn synth(a: SynthArgs, mut s: Settings, base: &Path) -> Result<(), CliError> {
    let d = CorpusConfig::default();
    let n_singers = s.get("singers", a.singers, d.n_singers)?;
    let test_default = n_singers.div_ceil(3);
    let cfg = CorpusConfig {
        n_singers,
        tracks_per_singer: s.get("tracks", a.tracks, d.tracks_per_singer)?,
        test_singers: Some(s.get("test_singers", a.test_singers, test_default)?),
        seed: s.get("seed", a.seed, d.seed)?,
        vocal_seconds: s.get("vocal_seconds", a.vocal_seconds, d.vocal_seconds)?,
        background_seconds: s.get("background_seconds", a.background_seconds, d.background_seconds)?,
        n_styles: s.get("styles", a.styles, d.n_styles)?,
        backgrounds_per_style: s.get("backgrounds_per_style", a.backgrounds_per_style, d.backgrounds_per_style)?,
    };
    cfg.validate()?;
    let rc = s.finish()?;
    let dir = rc.run_dir(base)?;
    announce(&rc, &dir);
    let manifest = build_corpus(&cfg, &dir)?;
    println!(
        "{} vocals, {} backgrounds; manifest hash {}",
        manifest.vocals().count(),
        manifest.backgrounds().count(),
        manifest.hash()?
    );
    Ok(())
}

fn mashup_config(m: &MixArgs, s: &mut Settings, seed: u64) -> Result<MashupConfig, CliError> {
    let d = MashupConfig::default();
    let cfg = MashupConfig {
        tempo_tolerance_bpm: s.get("tolerance", m.tolerance, d.tempo_tolerance_bpm)?,
        pairs_per_vocal_segment: s.get("pairs", m.pairs, d.pairs_per_vocal_segment)?,
        target_snr_db: s.get("mix_snr", m.mix_snr, d.target_snr_db)?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn mashup(a: MashupArgs, mut s: Settings, base: &Path) -> Result<(), CliError> {
    let corpus_path = s.input("corpus", a.corpus)?;
    let bg_path = s.optional_input("backgrounds", a.backgrounds)?;
    let seed = s.get("seed", a.seed, 0)?;
    let cfg = mashup_config(&a.mix, &mut s, seed)?;
    let render = s.switch("render", a.render)?;
    let rc = s.finish()?;

    let corpus = load_corpus(&corpus_path)?;
    let bg_corpus = bg_path.as_deref().map(load_corpus).transpose()?;
    let backgrounds = &bg_corpus.as_ref().unwrap_or(&corpus).backgrounds;
    let manifest = generate_dataset(&corpus.vocals, backgrounds, &cfg)?;
    let dir = rc.run_dir(base)?;
    announce(&rc, &dir);
    manifest.save(&dir.join("mashups.jsonl"))?;
    println!(
        "{} mashups; {} of {} vocal segments unpaired",
        manifest.recipes.len(),
        manifest.header.unpaired_segments,
        manifest.header.vocal_segments
    );
    if render {
        let wav_dir = dir.join("wav");
        std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        for (i, r) in manifest.recipes.iter().enumerate() {
            let v = corpus.vocal(&r.vocal.track_id).expect("recipe vocal comes from the corpus");
            let b = backgrounds
                .iter()
                .find(|b| b.input.track_id == r.background.track_id)
                .expect("recipe background comes from the pool");
            let mix = render_recipe(r, &v.input.clip, &b.input.clip)?;
            write_wav(wav_dir.join(format!("{i:05}.wav")), &mix, false)?;
        }
        println!("rendered {} WAVs to {}", manifest.recipes.len(), wav_dir.display());
    }
    Ok(())
}

/// `epoch,loss`, one row per epoch.
fn write_curve(path: &Path, losses: &[f64]) -> m2mx_core::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn train(a: TrainArgs, mut s: Settings, base: &Path) -> Result<(), CliError> {
    let corpus_path = s.input("corpus", a.corpus)?;
    let mashups_path = s.optional_input("mashups", a.mashups)?;
    let seed = s.get("seed", a.seed, 0)?;
    let mix_cfg = mashup_config(&a.mix, &mut s, seed)?;
    let mode: Mode = s.require::<String>("mode", a.mode)?.parse()?;
    let pretrain = s.switch("pretrain", a.pretrain)?;
    let mut plan = TrainPlan::new(mode, pretrain, seed);
    let mc = &mut plan.metric_config;
    mc.epochs = s.get("epochs", a.epochs, mc.epochs)?;
    mc.steps_per_epoch = s.get("steps", a.steps, mc.steps_per_epoch)?;
    mc.batch_size = s.get("batch", a.batch, mc.batch_size)?;
    mc.adam.learning_rate = s.get("lr", a.lr, mc.adam.learning_rate)?;
    mc.patience = s.get("patience", a.patience, mc.patience)?;
    let pc = &mut plan.pretrain_config;
    pc.epochs = s.get("pretrain_epochs", a.pretrain_epochs, pc.epochs)?;
    pc.steps_per_epoch = s.get("pretrain_steps", a.pretrain_steps, pc.steps_per_epoch)?;
    pc.batch_size = s.get("pretrain_batch", a.pretrain_batch, pc.batch_size)?;
    pc.adam.learning_rate = mc.adam.learning_rate;
    let t = &mut plan.triplet;
    t.margin = s.get("margin", a.margin, t.margin)?;
    t.n_negatives = s.get("negatives", a.negatives, t.n_negatives)?;
    t.hard_negatives = s.switch("hard_negatives", a.hard_negatives)?;
    plan.metric_config.validate()?;
    plan.pretrain_config.validate()?;
    plan.triplet.validate()?;
    let rc = s.finish()?;

    let corpus = load_corpus(&corpus_path)?;
    let mashups = match &mashups_path {
        Some(p) => MashupManifest::load(p)?,
        None => generate_dataset(&corpus.vocals, &corpus.backgrounds, &mix_cfg)?,
    };
    let set = build_training_set(&corpus, &mashups, Split::Train, plan.geometry.input_len())?;
    let dir = rc.run_dir(base)?;
    announce(&rc, &dir);
    println!(
        "{} training singers; {} monophonic and {} mixed segments",
        set.singers.len(),
        set.bank.count(Domain::Monophonic),
        set.bank.count(Domain::Mixed)
    );

    let (bundle, pretrain_curve) = initial_bundle(&set.bank, &plan)?;
    if pretrain {
        write_curve(&dir.join("pretrain_loss.csv"), &pretrain_curve)?;
    }
    let ckpt = dir.join("model.ckpt");
    // the starting point is the first "last good" checkpoint
    save_checkpoint(&bundle, &TrainState::fresh(&bundle, seed), &ckpt)?;
    let mut losses = Vec::new();
    let loss_path = dir.join("loss.csv");
    let mut hook = |b: &ModelBundle<f32>, st: &TrainState, loss: f64| -> m2mx_core::Result<()> {
        losses.push(loss);
        save_checkpoint(b, st, &ckpt)?;
        write_curve(&loss_path, &losses)
    };
    match train_metric(bundle, &set.bank, &plan.triplet, &plan.metric_config, None, Some(&mut hook)) {
        Ok((_, state, report)) => {
            write_curve(&loss_path, &report.epoch_losses)?;
            println!(
                "{} epochs{}; final loss {:.6}; checkpoint {}",
                state.epoch,
                if report.stopped_early { " (early stop)" } else { "" },
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                ckpt.display()
            );
            Ok(())
        }
        Err(e @ Error::Divergence { .. }) => Err(CliError {
            code: crate::EXIT_NUMERIC,
            message: format!("{e}; last good checkpoint kept at {}", ckpt.display()),
        }),
        Err(e) => Err(e.into()),
    }
}

enum Evaluated {
    Net(ModelBundle<f32>),
    Gmm(GmmBaseline),
}

fn load_model(path: &Path) -> Result<Evaluated, CliError> {
    match load_checkpoint(path) {
        Ok((b, _)) => Ok(Evaluated::Net(b)),
        Err(Error::BadMagic { .. }) => Ok(Evaluated::Gmm(GmmBaseline::load(path)?)),
        Err(e) => Err(e.into()),
    }
}

fn parse_snrs(list: &str) -> Result<Vec<f64>, CliError> {
    let snrs: Vec<f64> = list
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| CliError::config(format!("bad SNR {v:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    if snrs.is_empty() || snrs.iter().any(|v| !v.is_finite()) {
        return Err(CliError::config(format!("bad SNR list {list:?}")));
    }
    Ok(snrs)
}

fn protocol(p: &crate::ProtocolArgs, s: &mut Settings) -> Result<Protocol, CliError> {
    let d = Protocol::default();
    let out = Protocol {
        model_tracks: s.get("model_tracks", p.model_tracks, d.model_tracks)?,
        query_tracks: s.get("query_tracks", p.query_tracks, d.query_tracks)?,
        k: s.get("k", p.k, d.k)?,
    };
    if out.model_tracks == 0 || out.query_tracks == 0 || out.k == 0 {
        return Err(CliError::config("protocol track counts and k must be positive"));
    }
    Ok(out)
}

pub fn eval(a: EvalArgs, mut s: Settings, base: &Path) -> Result<(), CliError> {
    let gmm = s.switch("gmm", a.gmm)?;
    let checkpoint = if gmm { None } else { Some(s.input("checkpoint", a.checkpoint)?) };
    let corpus_path = s.input("corpus", a.corpus)?;
    let all = s.switch("all_scenarios", a.all_scenarios)?;
    let scenarios: Vec<Scenario> = if all {
        Scenario::ALL.to_vec()
    } else {
        vec![s.get("scenario", a.scenario, "mono2mix".to_string())?.parse()?]
    };
    let snrs = parse_snrs(&s.get("snr", a.snr, "0".to_string())?)?;
    let split: Split = s.get("split", a.split, "test".to_string())?.parse()?;
    let proto = protocol(&a.protocol, &mut s)?;
    let tolerance = s.get("tolerance", a.tolerance, 2.0)?;
    let seed = s.get("seed", a.seed, 0)?;
    let gmm_plan = if gmm {
        let d = GmmPlan::default();
        Some(GmmPlan {
            components: s.get("components", a.components, d.components)?,
            relevance: s.get("relevance", a.relevance, d.relevance)?,
            seed,
            ..d
        })
    } else {
        None
    };
    let rc = s.finish()?;

    let corpus = load_corpus(&corpus_path)?;
    let eval_corpus = EvalCorpus::new(&corpus, split, tolerance, seed)?;
    let dir = rc.run_dir(base)?;
    announce(&rc, &dir);
    let model = match (&gmm_plan, &checkpoint) {
        (Some(plan), _) => {
            let g = train_gmm_baseline(&corpus, plan)?;
            g.save(&dir.join("gmm.bin"))?;
            Evaluated::Gmm(g)
        }
        (None, Some(p)) => load_model(p)?,
        (None, None) => unreachable!("checkpoint is required without --gmm"),
    };
    let mut reports: Vec<MetricsReport> = match &model {
        Evaluated::Net(b) => snr_sweep(b, &eval_corpus, &snrs, &scenarios, &proto, seed)?,
        Evaluated::Gmm(g) => {
            let mut out = Vec::new();
            for &snr in &snrs {
                for &sc in &scenarios {
                    out.push(gmm_scenario(g, &eval_corpus, sc, &proto, snr, seed)?);
                }
            }
            out
        }
    };
    for r in &mut reports {
        r.config_hash = rc.hash();
    }
    export_report(&reports, &dir.join("report.csv"))?;
    for r in &reports {
        println!(
            "{:<9} {:<5} snr {:>5} dB  top1 {:.3}  top5 {:.3}  pr@{k} {:.3}  r@{k} {:.3}  map {:.3}",
            r.scenario.as_str(),
            r.model,
            r.snr_db.unwrap_or(f64::NAN),
            r.top1,
            r.top5,
            r.pr_at_k,
            r.r_at_k,
            r.map,
            k = proto.k
        );
    }
    Ok(())
}

pub fn project(a: ProjectArgs, mut s: Settings, base: &Path) -> Result<(), CliError> {
    let checkpoint = s.input("checkpoint", a.checkpoint)?;
    let corpus_path = s.input("corpus", a.corpus)?;
    let n_singers = s.get("singers", a.singers, 25)?;
    let n_tracks = s.get("tracks", a.tracks, 10)?;
    let split: Split = s.get("split", a.split, "test".to_string())?.parse()?;
    let snr = s.get("snr", a.snr, 0.0)?;
    let tolerance = s.get("tolerance", a.tolerance, 2.0)?;
    let seed = s.get("seed", a.seed, 0)?;
    let d = TsneConfig::default();
    let tsne = TsneConfig {
        perplexity: s.get("perplexity", a.perplexity, d.perplexity)?,
        iterations: s.get("iterations", a.iterations, d.iterations)?,
        seed,
        ..d
    };
    let rc = s.finish()?;

    let Evaluated::Net(bundle) = load_model(&checkpoint)? else {
        return Err(CliError::config("projection needs an embedding model, not a GMM baseline"));
    };
    let corpus = load_corpus(&corpus_path)?;
    let mut eval_corpus = EvalCorpus::new(&corpus, split, tolerance, seed)?;
    if eval_corpus.singers.len() < n_singers {
        return Err(CliError::data(format!(
            "the {split} split has {} singers, {n_singers} requested",
            eval_corpus.singers.len()
        )));
    }
    eval_corpus.singers.truncate(n_singers);
    let mut keep = Vec::new();
    for singer in &eval_corpus.singers {
        let mut own: Vec<_> = eval_corpus.mono.iter().filter(|t| &t.singer_id == singer).cloned().collect();
        if own.len() < n_tracks {
            return Err(CliError::data(format!("singer {singer} has {} tracks, {n_tracks} requested", own.len())));
        }
        own.sort_by(|x, y| x.track_id.cmp(&y.track_id));
        keep.extend(own.into_iter().take(n_tracks));
    }
    eval_corpus.mono = keep;
    let mut tracks = eval_corpus.mono.clone();
    tracks.extend(eval_corpus.mixed(snr)?);
    let vectors = embed_tracks(&bundle, &tracks, seed)?;
    let dir = rc.run_dir(base)?;
    announce(&rc, &dir);
    let result = project_2d(&vectors.iter().map(|v| v.values.clone()).collect::<Vec<_>>(), &tsne)?;
    let rows: Vec<ProjectionRow> = vectors
        .iter()
        .zip(&result.points)
        .map(|(v, p)| ProjectionRow {
            track_id: v.track_id.clone(),
            singer_id: v.singer_id.clone(),
            domain: v.domain,
            x: p[0],
            y: p[1],
        })
        .collect();
    let out: PathBuf = dir.join("projection.csv");
    export_projection(&rows, &out)?;
    println!(
        "{} points; KL {:.4} → {:.4}; {}",
        rows.len(),
        result.kl[0],
        result.kl.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}
