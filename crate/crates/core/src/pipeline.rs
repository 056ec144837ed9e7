//! Training orchestration shared by the command line and the experiment
//! drivers: optional classification pre-training followed by metric
//! learning, and the GMM-UBM baseline's background models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::detect_voiced_frames;
use crate::dataset::{render_track_mix, Corpus};
use crate::error::{Error, Result};
use crate::gmm::{train_ubm, voiced_mfcc, GmmBaseline, MfccSequence, DEFAULT_RELEVANCE};
use crate::model::train::EpochHook;
use crate::model::{
    pretrain_classifier, train_metric, Geometry, ModelBundle, Mode, SegmentBank, SkeletonParams,
    TrainConfig, TrainReport, TrainState, TripletConfig,
};
use crate::seed::derive_seed;
use crate::synth::Split;

/// Everything that determines a trained model besides its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub mode: Mode,
    pub pretrain: bool,
    pub pretrain_config: TrainConfig,
    pub metric_config: TrainConfig,
    pub triplet: TripletConfig,
    pub geometry: Geometry,
    pub seed: u64,
}

impl TrainPlan {
    /// Standard geometry, 30 classification epochs when pre-training, and
    /// the metric stage's defaults; every stage seeded from `seed`.
    pub fn new(mode: Mode, pretrain: bool, seed: u64) -> Self {
        TrainPlan {
            mode,
            pretrain,
            pretrain_config: TrainConfig {
                epochs: 30,
                seed: derive_seed(seed, &["pretrain"]),
                ..TrainConfig::default()
            },
            metric_config: TrainConfig {
                seed: derive_seed(seed, &["metric"]),
                ..TrainConfig::default()
            },
            triplet: TripletConfig::new(mode, derive_seed(seed, &["triplet"])),
            geometry: Geometry::standard(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle<f32>,
    pub state: TrainState,
    /// Per-epoch classification loss; empty without pre-training.
    pub pretrain_curve: Vec<f64>,
    pub report: TrainReport,
}

/// The initial bundle: random, or one skeleton pre-trained as a singer
/// classifier on the anchor domain and cloned into every network.
pub fn initial_bundle(bank: &SegmentBank, plan: &TrainPlan) -> Result<(ModelBundle<f32>, Vec<f64>)> {
    let init = SkeletonParams::random(&plan.geometry, derive_seed(plan.seed, &["init"]))?;
    if !plan.pretrain {
        return Ok((ModelBundle::from_skeleton(plan.mode, init), Vec::new()));
    }
    let (net, curve) = pretrain_classifier(bank, plan.mode.anchor_domain(), init, &plan.pretrain_config)?;
    Ok((ModelBundle::from_skeleton(plan.mode, net), curve))
}

pub fn train_model(bank: &SegmentBank, plan: &TrainPlan, on_epoch: Option<EpochHook<'_>>) -> Result<TrainOutcome> {
    if plan.triplet.mode != plan.mode {
        return Err(Error::Config("triplet mode differs from the plan's mode".into()));
    }
    let (bundle, pretrain_curve) = initial_bundle(bank, plan)?;
    let (bundle, state, report) = train_metric(bundle, bank, &plan.triplet, &plan.metric_config, None, on_epoch)?;
    Ok(TrainOutcome {
        bundle,
        state,
        pretrain_curve,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPlan {
    pub components: usize,
    pub max_iters: usize,
    pub relevance: f64,
    /// Background models see at most this many frames per domain.
    pub max_frames: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for GmmPlan {
    fn default() -> Self {
        GmmPlan {
            components: 32,
            max_iters: 100,
            relevance: DEFAULT_RELEVANCE,
            max_frames: 60_000,
            snr_db: 0.0,
            seed: 0,
        }
    }
}

fn thin(seq: MfccSequence, max_frames: usize) -> MfccSequence {
    if seq.n_frames <= max_frames {
        return seq;
    }
    let stride = seq.n_frames.div_ceil(max_frames);
    let values = seq.frames().step_by(stride).flat_map(|f| f.iter().copied()).collect();
    MfccSequence::new(values, seq.dim)
}

/// Two UBMs on the training split: one from the voiced frames of the
/// monophonic tracks, one from the same tracks mixed over their planned
/// backgrounds at `plan.snr_db`.
pub fn train_gmm_baseline(corpus: &Corpus, plan: &GmmPlan) -> Result<GmmBaseline> {
    let vocals = corpus.vocals_in(Split::Train);
    let mixes = crate::dataset::plan_track_mixes(corpus, Split::Train, 2.0, plan.seed)?;
    let per_track: Vec<(MfccSequence, MfccSequence)> = vocals
        .par_iter()
        .zip(&mixes)
        .map(|(v, m)| {
            let bg = corpus.background(&m.background_id).expect("planned from the corpus");
            let mix = render_track_mix(m, &v.input.clip, &bg.input.clip, plan.snr_db)?;
            let act = detect_voiced_frames(&v.input.clip);
            Ok((voiced_mfcc(&v.input.clip, &act)?, voiced_mfcc(&mix, &act)?))
        })
        .collect::<Result<_>>()?;
    let mono = thin(MfccSequence::concat(per_track.iter().map(|p| &p.0)), plan.max_frames);
    let mixed = thin(MfccSequence::concat(per_track.iter().map(|p| &p.1)), plan.max_frames);
    Ok(GmmBaseline {
        mono: train_ubm(&mono, plan.components, plan.max_iters, derive_seed(plan.seed, &["mono"]))?.params,
        mixed: train_ubm(&mixed, plan.components, plan.max_iters, derive_seed(plan.seed, &["mixed"]))?.params,
        relevance: plan.relevance,
    })
}
