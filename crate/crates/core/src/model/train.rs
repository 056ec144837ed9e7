//! Classification pre-training and multi-negative metric learning.

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::layers::BnStats;
use super::loss::{hinge_with_grad, softmax_cross_entropy};
use super::network::{backward, forward_with, ClassifierHead, ForwardCache, Phase, SkeletonParams};
use super::optim::{adam_step, AdamConfig, AdamMoments};
use super::sampling::{keep_hardest, sample_triplets, SegmentBank, TripletConfig};
use super::tensor::Real;
use super::{embed_batch, loss, Domain, ModelBundle};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    /// Early stop once the epoch loss has failed to improve on the best
    /// seen by at least `min_delta` for `patience` consecutive epochs.
    pub min_delta: f64,
    pub patience: usize,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            steps_per_epoch: 50,
            epochs: 100,
            min_delta: 1e-4,
            patience: 10,
            bn_momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch size and steps per epoch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("batchnorm momentum must lie in [0, 1)".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut r = Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// One entry per distinct parameter set of the bundle.
    pub moments: Vec<AdamMoments<f32>>,
    pub rng: RngState,
}

impl TrainState {
    pub fn fresh(bundle: &ModelBundle<f32>, seed: u64) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            moments: bundle
                .nets()
                .iter()
                .map(|n| AdamMoments::for_shapes(&tensor_lens(n)))
                .collect(),
            rng: RngState::capture(&seed::rng(seed)),
        }
    }

    pub fn congruent_with(&self, bundle: &ModelBundle<f32>) -> bool {
        let nets = bundle.nets();
        nets.len() == self.moments.len()
            && nets
                .iter()
                .zip(&self.moments)
                .all(|(n, m)| m.congruent_with(&tensor_lens(n)))
    }
}

fn tensor_lens<T: Real>(net: &SkeletonParams<T>) -> Vec<usize> {
    net.trainable().iter().map(|t| t.len()).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Loss and gradients of one triplet batch.
pub struct TripletGrads<T> {
    /// Batch mean of the summed hinge terms.
    pub loss: f64,
    /// Gradients per distinct parameter set (anchor first).
    pub grads: Vec<SkeletonParams<T>>,
    /// Batch statistics of each role group with its parameter-set index.
    pub stats: Vec<(usize, Vec<BnStats<T>>)>,
}

/// Forward and backward over the role groups: anchors through the anchor
/// network, positives and each negative slot through the other network.
/// Each group is its own batch for batchnorm purposes. Shared-parameter
/// modes sum every role's contribution into one gradient.
pub fn triplet_loss_and_grads<T: Real>(
    bundle: &ModelBundle<T>,
    anchors: &[T],
    positives: &[T],
    negatives: &[Vec<T>],
    batch: usize,
    margin: f64,
    dropout_seeds: &[u64],
) -> Result<TripletGrads<T>> {
    let batch = TripletBatch {
        anchors,
        positives,
        negatives,
        batch,
        margin,
        dropout_seeds,
    };
    let (g, _) = triplet_pass(bundle, &batch, None, true)?;
    Ok(g)
}

pub(crate) struct TripletBatch<'a, T> {
    pub anchors: &'a [T],
    pub positives: &'a [T],
    pub negatives: &'a [Vec<T>],
    pub batch: usize,
    pub margin: f64,
    pub dropout_seeds: &'a [u64],
}

/// With `patterns` the role groups replay those passes' branch choices;
/// without `want_grads` only the loss is filled in.
pub(crate) fn triplet_pass<T: Real>(
    bundle: &ModelBundle<T>,
    tb: &TripletBatch<'_, T>,
    patterns: Option<&[ForwardCache<T>]>,
    want_grads: bool,
) -> Result<(TripletGrads<T>, Vec<ForwardCache<T>>)> {
    let batch = tb.batch;
    if tb.negatives.is_empty() {
        return Err(Error::Empty("negatives"));
    }
    if tb.dropout_seeds.len() != 2 + tb.negatives.len() {
        return Err(Error::shape(
            format!("{} dropout seeds", 2 + tb.negatives.len()),
            format!("{}", tb.dropout_seeds.len()),
        ));
    }
    let other_idx = usize::from(bundle.other_net.is_some());
    let nets = bundle.nets();
    let mut groups: Vec<(usize, &[T])> = vec![(0, tb.anchors), (other_idx, tb.positives)];
    groups.extend(tb.negatives.iter().map(|n| (other_idx, n.as_slice())));

    let mut passes = Vec::with_capacity(groups.len());
    for (gi, (&(net, input), &seed)) in groups.iter().zip(tb.dropout_seeds).enumerate() {
        passes.push(forward_with(
            nets[net],
            input,
            batch,
            Phase::Train { dropout_seed: seed },
            patterns.map(|p| &p[gi]),
        )?);
    }
    let dim = bundle.geometry().embed_dim;
    let emb = |g: usize, i: usize| -> Vec<f64> {
        passes[g].embeddings[i * dim..(i + 1) * dim]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    };
    let mut d_emb: Vec<Vec<T>> = vec![vec![T::zero(); batch * dim]; groups.len()];
    let mut total = 0.0;
    let scale = 1.0 / batch as f64;
    for i in 0..batch {
        let a = emb(0, i);
        let p = emb(1, i);
        let ns: Vec<Vec<f64>> = (0..tb.negatives.len()).map(|j| emb(2 + j, i)).collect();
        let nrefs: Vec<&[f64]> = ns.iter().map(Vec::as_slice).collect();
        let g = hinge_with_grad(&a, &p, &nrefs, tb.margin)?;
        total += g.loss;
        let parts = std::iter::once(&g.anchor)
            .chain(std::iter::once(&g.positive))
            .chain(g.negatives.iter());
        for (gi, part) in parts.enumerate() {
            for (d, &v) in d_emb[gi][i * dim..(i + 1) * dim].iter_mut().zip(part) {
                *d = T::of(v * scale);
            }
        }
    }
    let mut grads: Vec<SkeletonParams<T>> = Vec::new();
    let mut stats = Vec::with_capacity(groups.len());
    let mut caches = Vec::with_capacity(groups.len());
    if want_grads {
        grads = nets.iter().map(|n| n.zeros_like()).collect();
    }
    for ((&(net, _), pass), d) in groups.iter().zip(passes).zip(&d_emb) {
        let cache = pass.cache.expect("train phase keeps caches");
        if want_grads {
            let g = backward(nets[net], &cache, d)?;
            grads[net].add_assign(&g);
        }
        stats.push((net, pass.stats));
        caches.push(cache);
    }
    Ok((
        TripletGrads {
            loss: total * scale,
            grads,
            stats,
        },
        caches,
    ))
}

/// Loss and gradients of one classification batch.
pub struct ClassifierGrads<T> {
    pub loss: f64,
    pub net: SkeletonParams<T>,
    pub head: ClassifierHead<T>,
    pub stats: Vec<BnStats<T>>,
}

pub fn classifier_loss_and_grads<T: Real>(
    net: &SkeletonParams<T>,
    head: &ClassifierHead<T>,
    input: &[T],
    labels: &[usize],
    dropout_seed: u64,
) -> Result<ClassifierGrads<T>> {
    Ok(classifier_pass(net, head, input, labels, dropout_seed, None)?.0)
}

pub(crate) fn classifier_pass<T: Real>(
    net: &SkeletonParams<T>,
    head: &ClassifierHead<T>,
    input: &[T],
    labels: &[usize],
    dropout_seed: u64,
    pattern: Option<&ForwardCache<T>>,
) -> Result<(ClassifierGrads<T>, ForwardCache<T>)> {
    let batch = labels.len();
    let pass = forward_with(net, input, batch, Phase::Train { dropout_seed }, pattern)?;
    let logits = head.logits(&pass.embeddings);
    let n = head.n_classes;
    let scale = 1.0 / batch as f64;
    let mut total = 0.0;
    let mut d_logits = vec![T::zero(); logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        let z: Vec<f64> = logits[i * n..(i + 1) * n].iter().map(|v| v.as_f64()).collect();
        let (l, g) = softmax_cross_entropy(&z, label)?;
        total += l;
        for (d, v) in d_logits[i * n..(i + 1) * n].iter_mut().zip(g) {
            *d = T::of(v * scale);
        }
    }
    let (head_grad, d_emb) = head.backward(&pass.embeddings, &d_logits);
    let cache = pass.cache.expect("train phase keeps caches");
    let net_grad = backward(net, &cache, &d_emb)?;
    Ok((
        ClassifierGrads {
            loss: total * scale,
            net: net_grad,
            head: head_grad,
            stats: pass.stats,
        },
        cache,
    ))
}

fn diverged(epoch: u64, step: u64, detail: impl Into<String>) -> Error {
    Error::Divergence {
        epoch: epoch as usize,
        step: step as usize,
        detail: detail.into(),
    }
}

/// Trains skeleton + softmax head with cross-entropy on `domain` segments
/// for exactly `config.epochs` epochs and returns the skeleton alone with
/// the per-epoch loss curve.
pub fn pretrain_classifier(
    bank: &SegmentBank,
    domain: Domain,
    init: SkeletonParams<f32>,
    config: &TrainConfig,
) -> Result<(SkeletonParams<f32>, Vec<f64>)> {
    config.validate()?;
    let ids = bank.ids(domain);
    if ids.is_empty() {
        return Err(Error::Empty("classification segments"));
    }
    if bank.n_singers < 2 {
        return Err(Error::Config("classification needs at least two singers".into()));
    }
    let mut net = init;
    let dim = net.geometry.embed_dim;
    let mut head = ClassifierHead::<f32>::random(
        bank.n_singers,
        dim,
        seed::derive_seed(config.seed, &["head"]),
    );
    let mut rng = seed::rng(seed::derive_seed(config.seed, &["pretrain"]));
    let mut net_m = AdamMoments::for_shapes(&tensor_lens(&net));
    let mut head_m = AdamMoments::for_shapes(&[head.weight.len(), head.bias.len()]);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs as u64 {
        let mut sum = 0.0;
        for _ in 0..config.steps_per_epoch {
            let batch: Vec<usize> = (0..config.batch_size)
                .map(|_| ids[(rng.next_u64() % ids.len() as u64) as usize])
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| bank.item(i).singer).collect();
            let input = bank.gather(&batch);
            let g = classifier_loss_and_grads(&net, &head, &input, &labels, rng.next_u64())?;
            if !g.loss.is_finite() {
                return Err(diverged(epoch, step, "classification loss is not finite"));
            }
            step += 1;
            adam_step(&config.adam, step, &mut net_m, net.trainable_mut(), g.net.trainable());
            adam_step(
                &config.adam,
                step,
                &mut head_m,
                vec![&mut head.weight, &mut head.bias],
                vec![&g.head.weight, &g.head.bias],
            );
            net.update_running_stats(&g.stats, config.bn_momentum);
            sum += g.loss;
        }
        if !net.is_finite() {
            return Err(diverged(epoch, step, "non-finite parameters"));
        }
        let mean = sum / config.steps_per_epoch as f64;
        log::info!("pretrain epoch {} loss {mean:.5}", epoch + 1);
        curve.push(mean);
    }
    Ok((net, curve))
}

/// Called after every completed epoch with the epoch's mean loss.
pub type EpochHook<'a> = &'a mut dyn FnMut(&ModelBundle<f32>, &TrainState, f64) -> Result<()>;

/// Minimizes the batch-mean hinge rank loss. Starting from `resume`
/// continues an earlier run exactly.
pub fn train_metric(
    mut bundle: ModelBundle<f32>,
    bank: &SegmentBank,
    triplet: &TripletConfig,
    config: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: Option<EpochHook<'_>>,
) -> Result<(ModelBundle<f32>, TrainState, TrainReport)> {
    config.validate()?;
    triplet.validate()?;
    bundle.validate()?;
    if bundle.mode != triplet.mode {
        return Err(Error::Config(format!(
            "bundle mode {} differs from triplet mode {}",
            bundle.mode, triplet.mode
        )));
    }
    let mut state = match resume {
        Some(s) if s.congruent_with(&bundle) => s,
        Some(_) => {
            return Err(Error::Config(
                "optimizer state does not match the model's parameters".into(),
            ))
        }
        None => TrainState::fresh(
            &bundle,
            seed::derive_seed(config.seed ^ triplet.seed, &["metric"]),
        ),
    };
    let mut rng = state.rng.restore();
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let b = config.batch_size;
    while (state.epoch as usize) < config.epochs {
        let mut sum = 0.0;
        for _ in 0..config.steps_per_epoch {
            let mut triplets = sample_triplets(bank, triplet, b, &mut rng)?;
            if triplet.hard_negatives {
                select_hard(&bundle, bank, &mut triplets, triplet.n_negatives)?;
            }
            let anchors = bank.gather(&triplets.iter().map(|t| t.anchor).collect::<Vec<_>>());
            let positives =
                bank.gather(&triplets.iter().map(|t| t.positive).collect::<Vec<_>>());
            let negatives: Vec<Vec<f32>> = (0..triplet.n_negatives)
                .map(|j| bank.gather(&triplets.iter().map(|t| t.negatives[j]).collect::<Vec<_>>()))
                .collect();
            let seeds: Vec<u64> = (0..2 + triplet.n_negatives).map(|_| rng.next_u64()).collect();
            let g = triplet_loss_and_grads(
                &bundle,
                &anchors,
                &positives,
                &negatives,
                b,
                triplet.margin,
                &seeds,
            )?;
            if !g.loss.is_finite() {
                return Err(diverged(state.epoch, state.step, "hinge loss is not finite"));
            }
            state.step += 1;
            let step = state.step;
            let mut nets = bundle.nets_mut();
            for (idx, stats) in &g.stats {
                nets[*idx].update_running_stats(stats, config.bn_momentum);
            }
            for ((net, grad), m) in nets.into_iter().zip(&g.grads).zip(&mut state.moments) {
                adam_step(&config.adam, step, m, net.trainable_mut(), grad.trainable());
            }
            sum += g.loss;
        }
        if bundle.nets().iter().any(|n| !n.is_finite()) {
            return Err(diverged(state.epoch, state.step, "non-finite parameters"));
        }
        let mean = sum / config.steps_per_epoch as f64;
        state.epoch += 1;
        state.rng = RngState::capture(&rng);
        report.epoch_losses.push(mean);
        log::info!("{} epoch {} loss {mean:.5}", bundle.mode, state.epoch);
        if let Some(hook) = on_epoch.as_mut() {
            hook(&bundle, &state, mean)?;
        }
        if best - mean >= config.min_delta {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok((bundle, state, report))
}

fn select_hard(
    bundle: &ModelBundle<f32>,
    bank: &SegmentBank,
    triplets: &mut [super::sampling::Triplet],
    n: usize,
) -> Result<()> {
    let feats = |id: usize| -> &[f32] { &bank.item(id).features };
    let anchor_in: Vec<&[f32]> = triplets.iter().map(|t| feats(t.anchor)).collect();
    let anchors = embed_batch(&bundle.anchor_net, &anchor_in)?;
    let cand_in: Vec<&[f32]> = triplets
        .iter()
        .flat_map(|t| t.negatives.iter().map(|&i| feats(i)))
        .collect();
    let cands = embed_batch(bundle.other(), &cand_in)?;
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let mut k = 0;
    for (t, a) in triplets.iter_mut().zip(&anchors) {
        let a = to64(a);
        let scores: Vec<f64> = t
            .negatives
            .iter()
            .map(|_| {
                let s = loss::cosine(&a, &to64(&cands[k])).unwrap_or(f64::NEG_INFINITY);
                k += 1;
                s
            })
            .collect();
        keep_hardest(t, &scores, n);
    }
    Ok(())
}
