//! Central finite-difference checks of every analytic gradient, run in
//! `f64` on width-reduced instances.
//!
//! Whole-network checks perturb parameters while replaying the base
//! pass's leaky-ReLU sides and pool winners: with thousands of units a
//! step of 1e-3 routinely pushes some unit across a kink, and the
//! difference quotient then measures the jump rather than the derivative.

use rand::Rng as _;

use super::layers::{
    batchnorm_backward, batchnorm_train, conv1d_backward, conv1d_forward, dropout_mask,
    leaky_relu, leaky_relu_backward, maxpool_backward, maxpool_forward, BatchNorm, Conv1d,
};
use super::loss::{cosine_with_grad, hinge_with_grad, softmax_cross_entropy};
use super::network::{ClassifierHead, Geometry, SkeletonParams};
use super::train::{classifier_pass, triplet_pass, TripletBatch};
use super::{Mode, ModelBundle};
use crate::seed;

pub const FD_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// Worst per-tensor relative error `‖num − ana‖ / max(‖num‖, ‖ana‖)`.
    pub rel_err: f64,
    pub n_values: usize,
}

/// Norm-wise relative error; two (numerically) zero gradients agree.
pub fn rel_err(num: &[f64], ana: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = num.iter().zip(ana).map(|(a, b)| a - b).collect();
    let scale = n(num).max(n(ana));
    if scale < 1e-10 {
        return n(&diff);
    }
    n(&diff) / scale
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_EPS;
            let fp = f(x);
            x[i] = orig - FD_EPS;
            let fm = f(x);
            x[i] = orig;
            (fp - fm) / (2.0 * FD_EPS)
        })
        .collect()
}

fn randn(rng: &mut seed::Rng, n: usize, scale: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Acc {
    name: String,
    worst: f64,
    n: usize,
}

impl Acc {
    fn new(name: &str) -> Self {
        Acc {
            name: name.into(),
            worst: 0.0,
            n: 0,
        }
    }
    fn add(&mut self, num: &[f64], ana: &[f64]) {
        self.worst = self.worst.max(rel_err(num, ana));
        self.n += num.len();
    }
    fn done(self) -> GradCheck {
        GradCheck {
            name: self.name,
            rel_err: self.worst,
            n_values: self.n,
        }
    }
}

fn check_conv(rng: &mut seed::Rng) -> GradCheck {
    let (batch, len, cin, cout, k) = (2, 7, 3, 4, 3);
    let mut conv = Conv1d::<f64>::zeros(cout, cin, k);
    conv.weight = randn(rng, conv.weight.len(), 0.5);
    conv.bias = randn(rng, cout, 0.5);
    let mut x = randn(rng, batch * len * cin, 1.0);
    let r = randn(rng, batch * len * cout, 1.0);
    let (_, col) = conv1d_forward(&x, batch, len, &conv);
    let g = conv1d_backward(&r, &col, batch, len, &conv, true);
    let mut acc = Acc::new("conv1d");
    let c0 = conv.clone();
    let num = numeric_grad(&mut x, |x| dotp(&r, &conv1d_forward(x, batch, len, &c0).0));
    acc.add(&num, g.input.as_ref().expect("requested"));
    let x0 = x.clone();
    let mut w = conv.weight.clone();
    let num = numeric_grad(&mut w, |w| {
        let mut c = c0.clone();
        c.weight = w.to_vec();
        dotp(&r, &conv1d_forward(&x0, batch, len, &c).0)
    });
    acc.add(&num, &g.weight);
    let mut b = conv.bias.clone();
    let num = numeric_grad(&mut b, |b| {
        let mut c = c0.clone();
        c.bias = b.to_vec();
        dotp(&r, &conv1d_forward(&x0, batch, len, &c).0)
    });
    acc.add(&num, &g.bias);
    acc.done()
}

fn check_batchnorm(rng: &mut seed::Rng) -> GradCheck {
    let (rows, c) = (14, 4);
    let mut bn = BatchNorm::<f64>::identity(c);
    bn.gamma = randn(rng, c, 1.0);
    bn.beta = randn(rng, c, 1.0);
    let mut y = randn(rng, rows * c, 2.0);
    let r = randn(rng, rows * c, 1.0);
    let (_, cache, _) = batchnorm_train(&y, rows, &bn);
    let g = batchnorm_backward(&r, &cache, &bn.gamma);
    let mut acc = Acc::new("batchnorm");
    let b0 = bn.clone();
    let num = numeric_grad(&mut y, |y| dotp(&r, &batchnorm_train(y, rows, &b0).0));
    acc.add(&num, &g.input);
    let y0 = y.clone();
    let mut gamma = bn.gamma.clone();
    let num = numeric_grad(&mut gamma, |gm| {
        let mut b = b0.clone();
        b.gamma = gm.to_vec();
        dotp(&r, &batchnorm_train(&y0, rows, &b).0)
    });
    acc.add(&num, &g.gamma);
    let mut beta = bn.beta.clone();
    let num = numeric_grad(&mut beta, |bt| {
        let mut b = b0.clone();
        b.beta = bt.to_vec();
        dotp(&r, &batchnorm_train(&y0, rows, &b).0)
    });
    acc.add(&num, &g.beta);
    acc.done()
}

fn check_leaky_relu(rng: &mut seed::Rng) -> GradCheck {
    // keep every input well clear of the kink
    let mut x: Vec<f64> = (0..40)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let r = randn(rng, x.len(), 1.0);
    let f = |x: &[f64]| {
        let mut y = x.to_vec();
        leaky_relu(&mut y);
        dotp(&r, &y)
    };
    let mut out = x.clone();
    leaky_relu(&mut out);
    let mut ana = r.clone();
    leaky_relu_backward(&mut ana, &out);
    let num = numeric_grad(&mut x, f);
    let mut acc = Acc::new("leaky_relu");
    acc.add(&num, &ana);
    acc.done()
}

fn spaced_permutation(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(rng);
    v
}

fn check_maxpool(rng: &mut seed::Rng, global: bool) -> GradCheck {
    let (batch, len, c) = (2, 9, 3);
    let size = if global { len } else { 3 };
    let mut x = spaced_permutation(rng, batch * len * c);
    let out_len = len / size;
    let r = randn(rng, batch * out_len * c, 1.0);
    let (_, arg) = maxpool_forward(&x, batch, len, c, size);
    let ana = maxpool_backward(&r, &arg, x.len());
    let num = numeric_grad(&mut x, |x| {
        dotp(&r, &maxpool_forward(x, batch, len, c, size).0)
    });
    let mut acc = Acc::new(if global { "global_maxpool" } else { "maxpool" });
    acc.add(&num, &ana);
    acc.done()
}

fn check_dropout(rng: &mut seed::Rng) -> GradCheck {
    let n = 64;
    let mask: Vec<f64> = dropout_mask(n, 0.5, 17);
    let mut x = randn(rng, n, 1.0);
    let r = randn(rng, n, 1.0);
    let ana: Vec<f64> = r.iter().zip(&mask).map(|(a, b)| a * b).collect();
    let num = numeric_grad(&mut x, |x| {
        x.iter()
            .zip(&mask)
            .zip(&r)
            .map(|((a, m), w)| a * m * w)
            .sum()
    });
    let mut acc = Acc::new("dropout");
    acc.add(&num, &ana);
    acc.done()
}

fn check_cosine(rng: &mut seed::Rng) -> GradCheck {
    let mut a = randn(rng, 8, 1.0);
    let mut b = randn(rng, 8, 1.0);
    let (_, da, db) = cosine_with_grad(&a, &b).expect("non-zero");
    let mut acc = Acc::new("cosine");
    let b0 = b.clone();
    acc.add(
        &numeric_grad(&mut a, |a| cosine_with_grad(a, &b0).expect("non-zero").0),
        &da,
    );
    let a0 = a.clone();
    acc.add(
        &numeric_grad(&mut b, |b| cosine_with_grad(&a0, b).expect("non-zero").0),
        &db,
    );
    acc.done()
}

fn check_hinge(rng: &mut seed::Rng) -> GradCheck {
    let margin = 0.5;
    // redraw until no hinge term sits near its kink
    let (a, p, negs) = loop {
        let a = randn(rng, 8, 1.0);
        let p = randn(rng, 8, 1.0);
        let negs: Vec<Vec<f64>> = (0..4).map(|_| randn(rng, 8, 1.0)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let sp = cosine_with_grad(&a, &p).expect("non-zero").0;
        let clear = refs.iter().all(|n| {
            let sn = cosine_with_grad(&a, n).expect("non-zero").0;
            (margin - sp + sn).abs() > 0.05
        });
        let active = refs
            .iter()
            .any(|n| margin - sp + cosine_with_grad(&a, n).expect("non-zero").0 > 0.0);
        if clear && active {
            break (a, p, negs);
        }
    };
    let loss = |a: &[f64], p: &[f64], negs: &[Vec<f64>]| {
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        hinge_with_grad(a, p, &refs, margin).expect("valid").loss
    };
    let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
    let g = hinge_with_grad(&a, &p, &refs, margin).expect("valid");
    let mut acc = Acc::new("hinge_rank_loss");
    let mut x = a.clone();
    acc.add(&numeric_grad(&mut x, |x| loss(x, &p, &negs)), &g.anchor);
    let mut x = p.clone();
    acc.add(&numeric_grad(&mut x, |x| loss(&a, x, &negs)), &g.positive);
    for j in 0..negs.len() {
        let mut x = negs[j].clone();
        let num = numeric_grad(&mut x, |x| {
            let mut n = negs.clone();
            n[j] = x.to_vec();
            loss(&a, &p, &n)
        });
        acc.add(&num, &g.negatives[j]);
    }
    acc.done()
}

fn check_softmax_ce(rng: &mut seed::Rng) -> GradCheck {
    let mut z = randn(rng, 6, 2.0);
    let (_, ana) = softmax_cross_entropy(&z, 3).expect("valid");
    let num = numeric_grad(&mut z, |z| softmax_cross_entropy(z, 3).expect("valid").0);
    let mut acc = Acc::new("softmax_cross_entropy");
    acc.add(&num, &ana);
    acc.done()
}

/// A narrow network that keeps the standard temporal trace.
pub fn reduced_geometry() -> Geometry {
    Geometry {
        in_channels: 6,
        hidden: 4,
        embed_dim: 5,
        ..Geometry::standard()
    }
}

fn perturbed_tensors<F>(net: &SkeletonParams<f64>, grads: &SkeletonParams<f64>, acc: &mut Acc, loss: F)
where
    F: Fn(&SkeletonParams<f64>) -> f64,
{
    let n_tensors = net.trainable().len();
    for ti in 0..n_tensors {
        let mut x = net.trainable()[ti].to_vec();
        let num = numeric_grad(&mut x, |x| {
            let mut p = net.clone();
            *p.trainable_mut()[ti] = x.to_vec();
            loss(&p)
        });
        acc.add(&num, grads.trainable()[ti]);
    }
}

fn check_network_triplet(mode: Mode, rng: &mut seed::Rng) -> GradCheck {
    let g = reduced_geometry();
    let batch = 3;
    let mut bundle = ModelBundle::<f64>::random(mode, &g, rng.random()).expect("valid geometry");
    if let Some(other) = bundle.other_net.as_mut() {
        *other = SkeletonParams::random(&g, rng.random()).expect("valid geometry");
    }
    for net in bundle.nets_mut() {
        for b in &mut net.blocks {
            b.bn.gamma = b.bn.gamma.iter().map(|_| rng.random_range(0.5..1.5)).collect();
            b.bn.beta = randn(rng, b.bn.beta.len(), 0.3);
        }
    }
    let n_in = batch * g.input_len();
    let anchors = randn(rng, n_in, 1.0);
    let positives = randn(rng, n_in, 1.0);
    let negatives: Vec<Vec<f64>> = (0..4).map(|_| randn(rng, n_in, 1.0)).collect();
    let seeds: Vec<u64> = (0..6).map(|_| rng.random()).collect();
    // a margin this wide keeps every hinge term active
    let margin = 2.5;
    let tb = TripletBatch {
        anchors: &anchors,
        positives: &positives,
        negatives: &negatives,
        batch,
        margin,
        dropout_seeds: &seeds,
    };
    let (base, pattern) = triplet_pass(&bundle, &tb, None, true).expect("valid batch");
    let grads = base.grads;
    let eval = |b: &ModelBundle<f64>| {
        triplet_pass(b, &tb, Some(&pattern), false).expect("valid batch").0
    };
    let mut acc = Acc::new(&format!("network_{}_triplet", mode.as_str()));
    let anchor = bundle.anchor_net.clone();
    perturbed_tensors(&anchor, &grads[0], &mut acc, |p| {
        let mut b = bundle.clone();
        b.anchor_net = p.clone();
        eval(&b).loss
    });
    if let Some(other) = bundle.other_net.clone() {
        perturbed_tensors(&other, &grads[1], &mut acc, |p| {
            let mut b = bundle.clone();
            b.other_net = Some(p.clone());
            eval(&b).loss
        });
    }
    acc.done()
}

fn check_network_classifier(rng: &mut seed::Rng) -> GradCheck {
    let g = reduced_geometry();
    let batch = 4;
    let net = SkeletonParams::<f64>::random(&g, rng.random()).expect("valid geometry");
    let mut head = ClassifierHead::<f64>::random(3, g.embed_dim, rng.random());
    head.bias = randn(rng, 3, 0.1);
    let input = randn(rng, batch * g.input_len(), 1.0);
    let labels = [0, 2, 1, 2];
    let seed = rng.random();
    let (grads, pattern) =
        classifier_pass(&net, &head, &input, &labels, seed, None).expect("valid batch");
    let eval = |n: &SkeletonParams<f64>, h: &ClassifierHead<f64>| {
        classifier_pass(n, h, &input, &labels, seed, Some(&pattern))
            .expect("valid batch")
            .0
    };
    let mut acc = Acc::new("network_classifier");
    perturbed_tensors(&net, &grads.net, &mut acc, |p| eval(p, &head).loss);
    let mut w = head.weight.clone();
    let num = numeric_grad(&mut w, |w| {
        let mut h = head.clone();
        h.weight = w.to_vec();
        eval(&net, &h).loss
    });
    acc.add(&num, &grads.head.weight);
    let mut b = head.bias.clone();
    let num = numeric_grad(&mut b, |b| {
        let mut h = head.clone();
        h.bias = b.to_vec();
        eval(&net, &h).loss
    });
    acc.add(&num, &grads.head.bias);
    acc.done()
}

/// Every layer, both losses, and whole-network gradients for each mode.
pub fn run_all(seed: u64) -> Vec<GradCheck> {
    let mut rng = seed::rng(seed);
    vec![
        check_conv(&mut rng),
        check_batchnorm(&mut rng),
        check_leaky_relu(&mut rng),
        check_maxpool(&mut rng, false),
        check_maxpool(&mut rng, true),
        check_dropout(&mut rng),
        check_cosine(&mut rng),
        check_hinge(&mut rng),
        check_softmax_ce(&mut rng),
        check_network_triplet(Mode::Mono, &mut rng),
        check_network_triplet(Mode::Cross, &mut rng),
        check_network_classifier(&mut rng),
    ]
}
