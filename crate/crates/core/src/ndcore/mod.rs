//! Dense tensors, the scalar kernels of the classifier (tempered softmax,
//! entropy, cosine similarity) and a small reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
pub(crate) use tensor::affine as tensor_affine;

use crate::error::{Error, Result};

/// Norm below which a vector is considered zero.
pub const NORM_EPS: f64 = 1e-12;

/// `softmax(tau * logits)`, computed with max subtraction.
pub fn softmax_t(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::InvalidValue("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite logit".into()));
    }
    Ok(softmax_t_unchecked(logits, tau))
}

pub(crate) fn softmax_t_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (tau * (l - max)).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidValue("entropy of an empty vector".into()));
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidValue(format!("probability {p} outside [0, 1]")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!("probabilities sum to {sum}")));
    }
    Ok(entropy_unchecked(probs))
}

pub(crate) fn entropy_unchecked(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // Rounding can push a one-hot entropy a hair below zero.
    h.max(0.0)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::DegenerateVector(NORM_EPS));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
