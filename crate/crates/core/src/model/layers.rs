//! Layer kernels with explicit forward and backward passes.
//!
//! Activations are row-major `[batch][time][channel]`; convolutions run
//! along time only, with mel bins (or feature maps) as channels.

use rand::Rng;

use super::tensor::Real;
use crate::seed;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `[out][in][kernel]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Conv1d {
            out_channels,
            in_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

/// Unfolds `[batch][len][cin]` into `[batch*len][cin*kernel]` with zero
/// "same" padding; column `i*kernel + j` holds input time `t + j - kernel/2`.
pub fn im2col<T: Real>(x: &[T], batch: usize, len: usize, cin: usize, kernel: usize) -> Vec<T> {
    let pad = kernel / 2;
    let width = cin * kernel;
    let mut col = vec![T::zero(); batch * len * width];
    for b in 0..batch {
        for t in 0..len {
            let row = &mut col[(b * len + t) * width..(b * len + t + 1) * width];
            for j in 0..kernel {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let xs = &x[(b * len + src as usize) * cin..(b * len + src as usize + 1) * cin];
                for (i, &v) in xs.iter().enumerate() {
                    row[i * kernel + j] = v;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Real>(col: &[T], batch: usize, len: usize, cin: usize, kernel: usize) -> Vec<T> {
    let pad = kernel / 2;
    let width = cin * kernel;
    let mut x = vec![T::zero(); batch * len * cin];
    for b in 0..batch {
        for t in 0..len {
            let row = &col[(b * len + t) * width..(b * len + t + 1) * width];
            for j in 0..kernel {
                let dst = t as isize + j as isize - pad as isize;
                if dst < 0 || dst >= len as isize {
                    continue;
                }
                let xs = &mut x[(b * len + dst as usize) * cin..(b * len + dst as usize + 1) * cin];
                for (i, v) in xs.iter_mut().enumerate() {
                    *v += row[i * kernel + j];
                }
            }
        }
    }
    x
}

/// Returns the output `[batch*len][out]` and the unfolded input.
pub fn conv1d_forward<T: Real>(
    x: &[T],
    batch: usize,
    len: usize,
    conv: &Conv1d<T>,
) -> (Vec<T>, Vec<T>) {
    let rows = batch * len;
    let col = im2col(x, batch, len, conv.in_channels, conv.kernel);
    let mut y = Vec::with_capacity(rows * conv.out_channels);
    for _ in 0..rows {
        y.extend_from_slice(&conv.bias);
    }
    T::gemm(
        false,
        true,
        rows,
        conv.out_channels,
        conv.fan_in(),
        T::one(),
        &col,
        &conv.weight,
        T::one(),
        &mut y,
    );
    (y, col)
}

pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Vec<T>>,
}

pub fn conv1d_backward<T: Real>(
    dy: &[T],
    col: &[T],
    batch: usize,
    len: usize,
    conv: &Conv1d<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let rows = batch * len;
    let (cout, width) = (conv.out_channels, conv.fan_in());
    let mut weight = vec![T::zero(); cout * width];
    T::gemm(true, false, cout, width, rows, T::one(), dy, col, T::zero(), &mut weight);
    let mut bias = vec![T::zero(); cout];
    for r in dy.chunks_exact(cout) {
        for (b, &g) in bias.iter_mut().zip(r) {
            *b += g;
        }
    }
    let input = need_input.then(|| {
        let mut dcol = vec![T::zero(); rows * width];
        T::gemm(false, false, rows, width, cout, T::one(), dy, &conv.weight, T::zero(), &mut dcol);
        col2im(&dcol, batch, len, conv.in_channels, conv.kernel)
    });
    ConvGrads {
        weight,
        bias,
        input,
    }
}

pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub invstd: Vec<T>,
}

/// Per-channel batch statistics gathered in a training-phase pass.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as folded into the running estimate.
    pub var: Vec<T>,
}

/// Training-phase batch normalization over all `rows` (batch × time).
pub fn batchnorm_train<T: Real>(
    y: &[T],
    rows: usize,
    bn: &BatchNorm<T>,
) -> (Vec<T>, BnCache<T>, BnStats<T>) {
    let c = bn.gamma.len();
    let n = T::of(rows as f64);
    let mut mean = vec![T::zero(); c];
    for r in y.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for r in y.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let unbiased: Vec<T> = var
        .iter()
        .map(|&s| if rows > 1 { s / T::of(rows as f64 - 1.0) } else { s })
        .collect();
    var.iter_mut().for_each(|s| *s = *s / n);
    let invstd: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt())
        .collect();
    let mut xhat = Vec::with_capacity(y.len());
    let mut z = Vec::with_capacity(y.len());
    for r in y.chunks_exact(c) {
        for ch in 0..c {
            let h = (r[ch] - mean[ch]) * invstd[ch];
            xhat.push(h);
            z.push(bn.gamma[ch] * h + bn.beta[ch]);
        }
    }
    (
        z,
        BnCache { xhat, invstd },
        BnStats {
            mean,
            var: unbiased,
        },
    )
}

/// Inference-phase normalization with the running statistics.
pub fn batchnorm_infer<T: Real>(y: &[T], bn: &BatchNorm<T>) -> Vec<T> {
    let c = bn.gamma.len();
    let scale: Vec<T> = (0..c)
        .map(|ch| bn.gamma[ch] / (bn.running_var[ch] + T::of(BN_EPS)).sqrt())
        .collect();
    let shift: Vec<T> = (0..c)
        .map(|ch| bn.beta[ch] - bn.running_mean[ch] * scale[ch])
        .collect();
    y.chunks_exact(c)
        .flat_map(|r| (0..c).map(|ch| r[ch] * scale[ch] + shift[ch]).collect::<Vec<_>>())
        .collect()
}

pub struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Real>(dz: &[T], cache: &BnCache<T>, gamma: &[T]) -> BnGrads<T> {
    let c = gamma.len();
    let rows = dz.len() / c;
    let n = T::of(rows as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g, h) in dz.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += g[ch] * h[ch];
            dbeta[ch] += g[ch];
        }
    }
    // with dxhat = dz * gamma:
    //   dy = invstd / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
    //      = invstd * gamma / n * (n * dz - dbeta - xhat * dgamma)
    let mut input = Vec::with_capacity(dz.len());
    for (g, h) in dz.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            let k = cache.invstd[ch] * gamma[ch] / n;
            input.push(k * (n * g[ch] - dbeta[ch] - h[ch] * dgamma[ch]));
        }
    }
    BnGrads {
        input,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub fn leaky_relu<T: Real>(x: &mut [T]) {
    let slope = T::of(LEAKY_SLOPE);
    for v in x {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
}

/// Backward through leaky ReLU given its output (sign-preserving, so the
/// output carries the branch).
pub fn leaky_relu_backward<T: Real>(grad: &mut [T], out: &[T]) {
    let slope = T::of(LEAKY_SLOPE);
    for (g, &o) in grad.iter_mut().zip(out) {
        if o < T::zero() {
            *g = *g * slope;
        }
    }
}

/// Non-overlapping max pooling along time (size = stride, no padding);
/// output length is `len / size`. Returns flat argmax indices into `x`.
pub fn maxpool_forward<T: Real>(
    x: &[T],
    batch: usize,
    len: usize,
    channels: usize,
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let out_len = len / size;
    let mut y = Vec::with_capacity(batch * out_len * channels);
    let mut arg = Vec::with_capacity(batch * out_len * channels);
    for b in 0..batch {
        for t in 0..out_len {
            for ch in 0..channels {
                let mut best = (b * len + t * size) * channels + ch;
                for j in 1..size {
                    let idx = (b * len + t * size + j) * channels + ch;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Real>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(n: usize, rate: f64, seed: u64) -> Vec<T> {
    if rate <= 0.0 {
        return vec![T::one(); n];
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

/// He-normal initialization for convolution weights.
pub fn init_conv<T: Real>(conv: &mut Conv1d<T>, rng: &mut seed::Rng) {
    use rand_distr::{Distribution, Normal};
    let std = (2.0 / conv.fan_in() as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    for w in &mut conv.weight {
        *w = T::of(normal.sample(rng));
    }
    conv.bias.iter_mut().for_each(|b| *b = T::zero());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let (b, l, c, k) = (2, 5, 3, 3);
        let x: Vec<f64> = (0..b * l * c).map(|i| (i as f64 * 0.7).sin()).collect();
        let cc: Vec<f64> = (0..b * l * c * k).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = im2col(&x, b, l, c, k).iter().zip(&cc).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&cc, b, l, c, k)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (b, l, cin, cout, k) = (2, 6, 3, 4, 3);
        let mut conv = Conv1d::<f64>::zeros(cout, cin, k);
        conv.weight.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64 * 0.17).sin());
        conv.bias.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64 * 0.1);
        let x: Vec<f64> = (0..b * l * cin).map(|i| (i as f64 * 0.41).cos()).collect();
        let (y, _) = conv1d_forward(&x, b, l, &conv);
        for bb in 0..b {
            for t in 0..l {
                for o in 0..cout {
                    let mut s = conv.bias[o];
                    for i in 0..cin {
                        for j in 0..k {
                            let src = t as isize + j as isize - 1;
                            if (0..l as isize).contains(&src) {
                                s += conv.weight[(o * cin + i) * k + j]
                                    * x[(bb * l + src as usize) * cin + i];
                            }
                        }
                    }
                    assert!((y[(bb * l + t) * cout + o] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_lengths() {
        let mut len = 129;
        let mut trace = vec![len];
        for _ in 0..4 {
            let x = vec![0.0f64; len];
            let (y, _) = maxpool_forward(&x, 1, len, 1, 3);
            len = y.len();
            trace.push(len);
        }
        assert_eq!(trace, vec![129, 43, 14, 4, 1]);
    }

    #[test]
    fn batchnorm_normalizes() {
        let bn = BatchNorm::<f64>::identity(2);
        let y = vec![1.0, 10.0, 3.0, 20.0, 5.0, 30.0];
        let (z, _, stats) = batchnorm_train(&y, 3, &bn);
        assert!((stats.mean[0] - 3.0).abs() < 1e-12);
        assert!((stats.var[1] - 100.0).abs() < 1e-9);
        let m0 = (z[0] + z[2] + z[4]) / 3.0;
        assert!(m0.abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_statistics() {
        let m: Vec<f64> = dropout_mask(10_000, 0.5, 3);
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((4500..5500).contains(&kept));
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(m, dropout_mask::<f64>(10_000, 0.5, 3));
    }
}
