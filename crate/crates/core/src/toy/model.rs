use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::ProbVector;
use crate::objective::{log_prob, softmax, LogitVector};
use crate::scalar::Real;

/// Context key: exactly `context_order` token ids, start-padded on the left.
pub type Context = Vec<u32>;

/// Context → logits table. Contexts never written to hold all-zero logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    vocab_size: usize,
    context_order: usize,
    table: BTreeMap<Context, LogitVector<T>>,
}

impl<T: Real> ToyModel<T> {
    /// Uniform model (all logits zero).
    pub fn uniform(vocab_size: usize, context_order: usize) -> Result<Self> {
        if !(2..=64).contains(&vocab_size) {
            return Err(Error::domain(format!("vocab_size must be in 2..=64, got {vocab_size}")));
        }
        if !(1..=3).contains(&context_order) {
            return Err(Error::domain(format!("context_order must be in 1..=3, got {context_order}")));
        }
        Ok(ToyModel {
            vocab_size,
            context_order,
            table: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    /// Padding symbol; one past the last vocabulary id, so it is never generated.
    pub fn start_symbol(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(t) => Err(Error::domain(format!(
                "token {t} out of range for vocabulary of size {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Context for predicting the token after `prompt ++ prefix`.
    pub fn context(&self, prompt: &[u32], prefix: &[u32]) -> Context {
        let history: Vec<u32> = prompt.iter().chain(prefix).copied().collect();
        let n = self.context_order;
        let mut ctx = vec![self.start_symbol(); n.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(n)..]);
        ctx
    }

    pub fn logits(&self, context: &[u32]) -> LogitVector<T> {
        self.table
            .get(context)
            .cloned()
            .unwrap_or_else(|| LogitVector::zeros(self.vocab_size))
    }

    pub fn logits_mut(&mut self, context: &[u32]) -> &mut LogitVector<T> {
        let v = self.vocab_size;
        self.table
            .entry(context.to_vec())
            .or_insert_with(|| LogitVector::zeros(v))
    }

    pub fn distribution(&self, context: &[u32]) -> ProbVector<T> {
        softmax(&self.logits(context))
    }

    /// Contexts with explicit parameters, in key order.
    pub fn contexts(&self) -> impl Iterator<Item = (&Context, &LogitVector<T>)> {
        self.table.iter()
    }

    /// Per-token `log p(s_t | context_t)` along `sequence`.
    pub fn token_logprobs(&self, prompt: &[u32], sequence: &[u32]) -> Result<Vec<T>> {
        self.check_tokens(prompt)?;
        self.check_tokens(sequence)?;
        Ok((0..sequence.len())
            .map(|t| log_prob(&self.logits(&self.context(prompt, &sequence[..t])), sequence[t] as usize))
            .collect())
    }

    /// `Σ_t log p(s_t | context_t)`; 0 for an empty sequence.
    pub fn sequence_logprob(&self, prompt: &[u32], sequence: &[u32]) -> Result<T> {
        Ok(self.token_logprobs(prompt, sequence)?.into_iter().sum())
    }

    /// Adds `amount` to the logit of each token of `sequence` in its context.
    pub fn boost(&mut self, prompt: &[u32], sequence: &[u32], amount: T) -> Result<()> {
        self.check_tokens(prompt)?;
        self.check_tokens(sequence)?;
        for t in 0..sequence.len() {
            let ctx = self.context(prompt, &sequence[..t]);
            self.logits_mut(&ctx).as_mut_slice()[sequence[t] as usize] += amount;
        }
        Ok(())
    }

    /// Argmax decoding (ties to the lowest id) for `len` tokens, with the
    /// distribution seen at every step.
    pub fn greedy(&self, prompt: &[u32], len: usize) -> (Vec<u32>, Vec<ProbVector<T>>) {
        let mut seq = Vec::with_capacity(len);
        let mut dists = Vec::with_capacity(len);
        for _ in 0..len {
            let d = self.distribution(&self.context(prompt, &seq));
            let best = d
                .probs()
                .iter()
                .enumerate()
                .fold((0usize, T::neg_infinity()), |(bi, bp), (i, &p)| if p > bp { (i, p) } else { (bi, bp) })
                .0;
            seq.push(best as u32);
            dists.push(d);
        }
        (seq, dists)
    }
}
