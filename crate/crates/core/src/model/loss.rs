//! Cosine similarity, the multi-negative hinge rank loss and softmax
//! cross-entropy, each with exact gradients.

use super::network::EmbeddingVector;
use crate::error::{Error, Result};

pub const CE_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} dims", a.len()), format!("{} dims", b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((na, nb))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_pair(a, b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine(&a.values, &b.values)
}

/// `S(a, b)` with `(dS/da, dS/db)`.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = check_pair(a, b)?;
    let s = dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - s * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x / (na * nb) - s * y / (nb * nb))
        .collect();
    Ok((s, da, db))
}

pub fn hinge_rank_loss(
    anchor: &EmbeddingVector,
    positive: &EmbeddingVector,
    negatives: &[EmbeddingVector],
    margin: f64,
) -> Result<f64> {
    let negs: Vec<&[f64]> = negatives.iter().map(|n| n.values.as_slice()).collect();
    Ok(hinge_with_grad(&anchor.values, &positive.values, &negs, margin)?.loss)
}

#[derive(Debug, Clone)]
pub struct HingeGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// `Σ_n max(0, margin − S(a,p) + S(a,n))` and its gradient. Terms sitting
/// exactly on the hinge contribute no gradient.
pub fn hinge_with_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    margin: f64,
) -> Result<HingeGrad> {
    if negatives.is_empty() {
        return Err(Error::Empty("negatives"));
    }
    let (sp, dap, dp) = cosine_with_grad(anchor, positive)?;
    let dim = anchor.len();
    let mut g = HingeGrad {
        loss: 0.0,
        anchor: vec![0.0; dim],
        positive: vec![0.0; dim],
        negatives: Vec::with_capacity(negatives.len()),
    };
    for neg in negatives {
        let (sn, dan, dn) = cosine_with_grad(anchor, neg)?;
        let term = margin - sp + sn;
        if term > 0.0 {
            g.loss += term;
            for i in 0..dim {
                g.anchor[i] += dan[i] - dap[i];
                g.positive[i] -= dp[i];
            }
            g.negatives.push(dn);
        } else {
            g.negatives.push(vec![0.0; dim]);
        }
    }
    Ok(g)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn cross_entropy_loss(probs: &[f64], target: usize) -> Result<f64> {
    let p = probs.get(target).ok_or(Error::IndexOutOfRange {
        index: target,
        len: probs.len(),
    })?;
    Ok(-(p + CE_EPS).ln())
}

/// Cross-entropy of `softmax(logits)` with its gradient in the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let probs = softmax(logits);
    let loss = cross_entropy_loss(&probs, target)?;
    let pt = probs[target];
    // d/dz_j of −ln(p_t + ε) = −p_t (δ_tj − p_j) / (p_t + ε)
    let c = pt / (pt + CE_EPS);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| c * (pj - if j == target { 1.0 } else { 0.0 }))
        .collect();
    Ok((loss, grad))
}
