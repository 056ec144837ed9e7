//! The skeleton network: four (conv → batchnorm → leaky ReLU) blocks along
//! time, each but the last followed by a max-pool, then a width-1
//! projection to the embedding size, dropout and a global temporal max-pool.

use serde::{Deserialize, Serialize};

use super::layers::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, conv1d_backward, conv1d_forward,
    dropout_mask, init_conv, leaky_relu, leaky_relu_backward, maxpool_backward, maxpool_forward,
    BatchNorm, BnCache, BnStats, Conv1d, LEAKY_SLOPE,
};
use super::tensor::Real;
use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub input_frames: usize,
    /// Mel bins, treated as input channels.
    pub in_channels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub pool: usize,
    pub n_blocks: usize,
    pub dropout: f64,
}

impl Geometry {
    /// 129 × 128 log-mel input, four 128-filter blocks, 256-d output.
    pub fn standard() -> Self {
        Geometry {
            input_frames: 129,
            in_channels: 128,
            hidden: 128,
            embed_dim: 256,
            kernel: 3,
            pool: 3,
            n_blocks: 4,
            dropout: 0.5,
        }
    }

    /// Temporal length at the input, after each pool, and after the
    /// global pool: `[129, 43, 14, 4, 1]` for the standard geometry. The
    /// last block runs at the final pooled length and is not pooled itself.
    pub fn temporal_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.input_frames];
        let mut len = self.input_frames;
        for _ in 1..self.n_blocks {
            len /= self.pool;
            trace.push(len);
        }
        trace.push(usize::from(len > 0));
        trace
    }

    /// Temporal length seen by the projection layer.
    pub fn final_len(&self) -> usize {
        self.temporal_trace()[self.n_blocks - 1]
    }

    pub fn input_len(&self) -> usize {
        self.input_frames * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.pool == 0 || self.final_len() == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("degenerate network geometry {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub conv: Conv1d<T>,
    pub bn: BatchNorm<T>,
}

/// All weights of one skeleton network.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonParams<T = f32> {
    pub geometry: Geometry,
    pub blocks: Vec<Block<T>>,
    /// The final width-1 convolution producing the embedding channels.
    pub projection: Conv1d<T>,
}

impl<T: Real> SkeletonParams<T> {
    pub fn zeros(geometry: &Geometry) -> Self {
        let blocks = (0..geometry.n_blocks)
            .map(|i| {
                let cin = if i == 0 {
                    geometry.in_channels
                } else {
                    geometry.hidden
                };
                Block {
                    conv: Conv1d::zeros(geometry.hidden, cin, geometry.kernel),
                    bn: BatchNorm::identity(geometry.hidden),
                }
            })
            .collect();
        SkeletonParams {
            geometry: geometry.clone(),
            blocks,
            projection: Conv1d::zeros(geometry.embed_dim, geometry.hidden, 1),
        }
    }

    pub fn random(geometry: &Geometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let mut p = Self::zeros(geometry);
        let mut rng = seed::rng(seed);
        for b in &mut p.blocks {
            init_conv(&mut b.conv, &mut rng);
        }
        init_conv(&mut p.projection, &mut rng);
        Ok(p)
    }

    /// Same shapes with every trainable value zero; used for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.geometry);
        for b in &mut z.blocks {
            b.bn.gamma.iter_mut().for_each(|g| *g = T::zero());
        }
        z
    }

    /// Trainable tensors in declared order: per block (weight, bias,
    /// gamma, beta), then projection (weight, bias).
    pub fn trainable(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            v.extend([
                b.conv.weight.as_slice(),
                &b.conv.bias,
                &b.bn.gamma,
                &b.bn.beta,
            ]);
        }
        v.extend([self.projection.weight.as_slice(), &self.projection.bias]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v: Vec<&mut Vec<T>> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.conv.weight);
            v.push(&mut b.conv.bias);
            v.push(&mut b.bn.gamma);
            v.push(&mut b.bn.beta);
        }
        v.push(&mut self.projection.weight);
        v.push(&mut self.projection.bias);
        v
    }

    /// Every stored tensor (trainable and running statistics) in the
    /// checkpoint order: per block (weight, bias, gamma, beta,
    /// running_mean, running_var), then projection (weight, bias).
    pub fn all_tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            v.extend([
                b.conv.weight.as_slice(),
                &b.conv.bias,
                &b.bn.gamma,
                &b.bn.beta,
                &b.bn.running_mean,
                &b.bn.running_var,
            ]);
        }
        v.extend([self.projection.weight.as_slice(), &self.projection.bias]);
        v
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v: Vec<&mut Vec<T>> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.conv.weight);
            v.push(&mut b.conv.bias);
            v.push(&mut b.bn.gamma);
            v.push(&mut b.bn.beta);
            v.push(&mut b.bn.running_mean);
            v.push(&mut b.bn.running_var);
        }
        v.push(&mut self.projection.weight);
        v.push(&mut self.projection.bias);
        v
    }

    pub fn n_parameters(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.trainable_mut().into_iter().zip(other.trainable()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.trainable_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.all_tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> SkeletonParams<U> {
        let mut out = SkeletonParams::<U>::zeros(&self.geometry);
        for (dst, src) in out.all_tensors_mut().into_iter().zip(self.all_tensors()) {
            *dst = src.iter().map(|&x| U::of(x.as_f64())).collect();
        }
        out
    }

    /// Folds one batch's statistics into the running estimates:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, stats: &[BnStats<T>], momentum: f64) {
        let m = T::of(momentum);
        let one_m = T::of(1.0 - momentum);
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            for (r, &x) in b.bn.running_mean.iter_mut().zip(&s.mean) {
                *r = m * *r + one_m * x;
            }
            for (r, &x) in b.bn.running_var.iter_mut().zip(&s.var) {
                *r = m * *r + one_m * x;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, dropout drawn from the seed.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Infer,
}

struct BlockCache<T> {
    len: usize,
    col: Vec<T>,
    bn: BnCache<T>,
    act: Vec<T>,
    argmax: Vec<usize>,
}

/// Intermediates retained by a training-phase pass for [`backward`].
pub struct ForwardCache<T> {
    batch: usize,
    blocks: Vec<BlockCache<T>>,
    proj_len: usize,
    proj_col: Vec<T>,
    mask: Vec<T>,
    global_argmax: Vec<usize>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

pub struct ForwardPass<T> {
    /// `[batch][embed_dim]`
    pub embeddings: Vec<T>,
    pub cache: Option<ForwardCache<T>>,
    /// One entry per block; empty in the inference phase.
    pub stats: Vec<BnStats<T>>,
}

/// Runs a batch of `[frames][mel]` inputs laid end to end.
pub fn forward<T: Real>(
    params: &SkeletonParams<T>,
    input: &[T],
    batch: usize,
    phase: Phase,
) -> Result<ForwardPass<T>> {
    forward_with(params, input, batch, phase, None)
}

fn pool_like<T: Real>(x: &[T], argmax: &[usize]) -> (Vec<T>, Vec<usize>) {
    (argmax.iter().map(|&i| x[i]).collect(), argmax.to_vec())
}

/// Like [`forward`], but with `pattern` given every piecewise-linear
/// choice (leaky ReLU side, pool winner) is copied from that earlier pass
/// instead of being decided afresh. This evaluates the smooth piece the
/// earlier pass lies on, which is what finite differences must probe.
pub(crate) fn forward_with<T: Real>(
    params: &SkeletonParams<T>,
    input: &[T],
    batch: usize,
    phase: Phase,
    pattern: Option<&ForwardCache<T>>,
) -> Result<ForwardPass<T>> {
    let g = &params.geometry;
    if batch == 0 || input.len() != batch * g.input_len() {
        return Err(Error::shape(
            format!("{batch} × {} × {}", g.input_frames, g.in_channels),
            format!("{} values", input.len()),
        ));
    }
    let train = matches!(phase, Phase::Train { .. });
    let mut x: Vec<T> = input.to_vec();
    let mut len = g.input_frames;
    let mut caches = Vec::new();
    let mut stats = Vec::new();
    for (i, block) in params.blocks.iter().enumerate() {
        let rows = batch * len;
        let (y, col) = conv1d_forward(&x, batch, len, &block.conv);
        let mut act = if train {
            let (z, cache, s) = batchnorm_train(&y, rows, &block.bn);
            stats.push(s);
            caches.push(BlockCache {
                len,
                col,
                bn: cache,
                act: Vec::new(),
                argmax: Vec::new(),
            });
            z
        } else {
            batchnorm_infer(&y, &block.bn)
        };
        match pattern {
            Some(p) => {
                let slope = T::of(LEAKY_SLOPE);
                for (v, &r) in act.iter_mut().zip(&p.blocks[i].act) {
                    if r < T::zero() {
                        *v *= slope;
                    }
                }
            }
            None => leaky_relu(&mut act),
        }
        if i + 1 == params.blocks.len() {
            x = act.clone();
            if let Some(c) = caches.last_mut() {
                c.act = act;
            }
            break;
        }
        let (pooled, argmax) = match pattern {
            Some(p) => pool_like(&act, &p.blocks[i].argmax),
            None => maxpool_forward(&act, batch, len, g.hidden, g.pool),
        };
        if let Some(c) = caches.last_mut() {
            c.act = act;
            c.argmax = argmax;
        }
        x = pooled;
        len /= g.pool;
    }
    let (mut proj, proj_col) = conv1d_forward(&x, batch, len, &params.projection);
    let mask = match phase {
        Phase::Train { dropout_seed } => {
            let m: Vec<T> = dropout_mask(proj.len(), g.dropout, dropout_seed);
            proj.iter_mut().zip(&m).for_each(|(p, &k)| *p *= k);
            m
        }
        Phase::Infer => Vec::new(),
    };
    let (embeddings, global_argmax) = match pattern {
        Some(p) => pool_like(&proj, &p.global_argmax),
        None => maxpool_forward(&proj, batch, len, g.embed_dim, len),
    };
    let cache = train.then(|| ForwardCache {
        batch,
        blocks: caches,
        proj_len: len,
        proj_col,
        mask,
        global_argmax,
    });
    Ok(ForwardPass {
        embeddings,
        cache,
        stats,
    })
}

/// Exact gradients of a scalar loss with respect to every trainable
/// tensor, given `d loss / d embedding` for each batch item.
pub fn backward<T: Real>(
    params: &SkeletonParams<T>,
    cache: &ForwardCache<T>,
    d_embeddings: &[T],
) -> Result<SkeletonParams<T>> {
    let g = &params.geometry;
    let batch = cache.batch;
    if d_embeddings.len() != batch * g.embed_dim || cache.blocks.len() != params.blocks.len() {
        return Err(Error::shape(
            format!("{batch} × {} gradient", g.embed_dim),
            format!("{} values", d_embeddings.len()),
        ));
    }
    let mut grads = params.zeros_like();
    let proj_rows = batch * cache.proj_len;
    let mut d = maxpool_backward(d_embeddings, &cache.global_argmax, proj_rows * g.embed_dim);
    d.iter_mut().zip(&cache.mask).for_each(|(x, &m)| *x *= m);
    let pg = conv1d_backward(&d, &cache.proj_col, batch, cache.proj_len, &params.projection, true);
    grads.projection.weight = pg.weight;
    grads.projection.bias = pg.bias;
    let mut d = pg.input.expect("requested");
    for (i, (block, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let mut da = if bc.argmax.is_empty() {
            std::mem::take(&mut d)
        } else {
            maxpool_backward(&d, &bc.argmax, batch * bc.len * g.hidden)
        };
        leaky_relu_backward(&mut da, &bc.act);
        let bg = batchnorm_backward(&da, &bc.bn, &block.bn.gamma);
        let cg = conv1d_backward(&bg.input, &bc.col, batch, bc.len, &block.conv, i > 0);
        let gb = &mut grads.blocks[i];
        gb.conv.weight = cg.weight;
        gb.conv.bias = cg.bias;
        gb.bn.gamma = bg.gamma;
        gb.bn.beta = bg.beta;
        if let Some(dx) = cg.input {
            d = dx;
        }
    }
    Ok(grads)
}

/// A 256-d (in the standard geometry) embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn mel_input<T: Real>(params: &SkeletonParams<T>, mel: &MelSpectrogram) -> Result<Vec<T>> {
    let g = &params.geometry;
    if mel.n_frames != g.input_frames || mel.n_mels != g.in_channels {
        return Err(Error::shape(
            format!("{} × {}", g.input_frames, g.in_channels),
            format!("{} × {}", mel.n_frames, mel.n_mels),
        ));
    }
    Ok(mel.values.iter().map(|&v| T::of(v)).collect())
}

/// Embeds a single mel spectrogram. In the training phase the batch
/// statistics come from this one input.
pub fn forward_embed<T: Real>(
    params: &SkeletonParams<T>,
    input: &MelSpectrogram,
    phase: Phase,
) -> Result<EmbeddingVector> {
    let x = mel_input(params, input)?;
    let out = forward(params, &x, 1, phase)?;
    Ok(EmbeddingVector::new(
        out.embeddings.iter().map(|v| v.as_f64()).collect(),
    ))
}

/// Inference-phase embeddings for many inputs, evaluated in chunks.
pub fn embed_batch<T: Real>(params: &SkeletonParams<T>, inputs: &[&[T]]) -> Result<Vec<Vec<T>>> {
    const CHUNK: usize = 32;
    let g = &params.geometry;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let mut x = Vec::with_capacity(chunk.len() * g.input_len());
        for inp in chunk {
            x.extend_from_slice(inp);
        }
        let pass = forward(params, &x, chunk.len(), Phase::Infer)?;
        out.extend(pass.embeddings.chunks_exact(g.embed_dim).map(|e| e.to_vec()));
    }
    Ok(out)
}

/// Linear softmax layer placed on top of the skeleton during
/// classification pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T = f32> {
    pub n_classes: usize,
    pub dim: usize,
    /// `[n_classes][dim]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        ClassifierHead {
            n_classes,
            dim,
            weight: vec![T::zero(); n_classes * dim],
            bias: vec![T::zero(); n_classes],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random(n_classes: usize, dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut h = Self::zeros(n_classes, dim);
        let limit = (6.0 / (n_classes + dim) as f64).sqrt();
        let mut rng = seed::rng(seed);
        for w in &mut h.weight {
            *w = T::of(rng.random_range(-limit..limit));
        }
        h
    }

    /// `[batch][n_classes]` logits.
    pub fn logits(&self, embeddings: &[T]) -> Vec<T> {
        let batch = embeddings.len() / self.dim;
        let mut out = Vec::with_capacity(batch * self.n_classes);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        T::gemm(
            false,
            true,
            batch,
            self.n_classes,
            self.dim,
            T::one(),
            embeddings,
            &self.weight,
            T::one(),
            &mut out,
        );
        out
    }

    /// Returns (head gradient, d loss / d embeddings).
    pub fn backward(&self, embeddings: &[T], d_logits: &[T]) -> (ClassifierHead<T>, Vec<T>) {
        let batch = embeddings.len() / self.dim;
        let mut g = Self::zeros(self.n_classes, self.dim);
        T::gemm(
            true,
            false,
            self.n_classes,
            self.dim,
            batch,
            T::one(),
            d_logits,
            embeddings,
            T::zero(),
            &mut g.weight,
        );
        for r in d_logits.chunks_exact(self.n_classes) {
            for (b, &x) in g.bias.iter_mut().zip(r) {
                *b += x;
            }
        }
        let mut de = vec![T::zero(); batch * self.dim];
        T::gemm(
            false,
            false,
            batch,
            self.dim,
            self.n_classes,
            T::one(),
            d_logits,
            &self.weight,
            T::zero(),
            &mut de,
        );
        (g, de)
    }
}

/// Softmax class probabilities for one input (inference phase).
pub fn forward_classify<T: Real>(
    params: &SkeletonParams<T>,
    head: &ClassifierHead<T>,
    input: &MelSpectrogram,
) -> Result<Vec<f64>> {
    if head.n_classes < 2 || head.dim != params.geometry.embed_dim {
        return Err(Error::shape(
            format!("head over {} dims with ≥ 2 classes", params.geometry.embed_dim),
            format!("{} classes × {} dims", head.n_classes, head.dim),
        ));
    }
    let e = forward_embed(params, input, Phase::Infer)?;
    let et: Vec<T> = e.values.iter().map(|&v| T::of(v)).collect();
    let logits: Vec<f64> = head.logits(&et).iter().map(|v| v.as_f64()).collect();
    Ok(super::loss::softmax(&logits))
}
