//! Perplexity and Shannon entropy, natural log throughout.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A normalized, nonnegative probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<T> {
    probs: Vec<T>,
}

impl<T: Real> ProbVector<T> {
    /// Validates nonnegativity and normalization (see [`Real::normalization_tol`]).
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("probability vector is empty"));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= T::zero())) {
            return Err(Error::domain(format!("probability[{i}] = {p} is not a finite value >= 0")));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::normalization_tol(probs.len()) {
            return Err(Error::domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(ProbVector { probs })
    }

    /// Wraps a vector the caller guarantees is normalized (e.g. a softmax output).
    pub(crate) fn from_normalized(probs: Vec<T>) -> Self {
        debug_assert!(!probs.is_empty());
        ProbVector { probs }
    }

    pub fn uniform(size: usize) -> Self {
        let p = T::one() / T::lit(size as f64);
        ProbVector { probs: vec![p; size] }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn into_inner(self) -> Vec<T> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `exp(-mean(logprobs))`. The mean is taken first so that a single
/// exponentiation is performed.
pub fn perplexity<T: Real>(token_logprobs: &[T]) -> Result<T> {
    if token_logprobs.is_empty() {
        return Err(Error::domain("perplexity of an empty sequence"));
    }
    let mut total = T::zero();
    for (i, &lp) in token_logprobs.iter().enumerate() {
        if !(lp.is_finite() && lp <= T::zero()) {
            return Err(Error::domain(format!("log-probability[{i}] = {lp} is not finite and <= 0")));
        }
        total += lp;
    }
    let mean = total / T::lit(token_logprobs.len() as f64);
    Ok((-mean).exp())
}

/// Shannon entropy `-Σ p log p` with `0 log 0 = 0`.
pub fn entropy<T: Real>(p: &ProbVector<T>) -> T {
    -p.probs
        .iter()
        .filter(|&&pi| pi > T::zero())
        .map(|&pi| pi * pi.ln())
        .sum::<T>()
}

/// Arithmetic mean of per-step entropies.
pub fn mean_sequence_entropy<T: Real>(per_step: &[ProbVector<T>]) -> Result<T> {
    if per_step.is_empty() {
        return Err(Error::domain("mean entropy of an empty step list"));
    }
    let total: T = per_step.iter().map(entropy).sum();
    Ok(total / T::lit(per_step.len() as f64))
}
