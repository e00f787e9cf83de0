use num_bigint::BigUint;
use num_rational::Ratio;
use num_traits::{One, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objective::{softmax, LogitVector};
use crate::scalar::Real;

use super::model::ToyModel;

/// Ancestral sampling of `samples` continuations of `len` tokens at the given
/// temperature. Deterministic for a fixed seed.
pub fn rollout<T: Real>(
    model: &ToyModel<T>,
    prompt: &[u32],
    samples: usize,
    temperature: f64,
    len: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if samples == 0 {
        return Err(Error::domain("rollout needs at least one sample"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::domain(format!("temperature must be > 0, got {temperature}")));
    }
    model.check_tokens(prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_t = T::lit(1.0 / temperature);
    Ok((0..samples)
        .map(|_| {
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                let scaled: Vec<T> = model
                    .logits(&model.context(prompt, &seq))
                    .as_slice()
                    .iter()
                    .map(|&z| z * inv_t)
                    .collect();
                let probs = softmax(&LogitVector::new(scaled).expect("finite scaled logits"));
                seq.push(draw(probs.probs(), rng.gen::<f64>()) as u32);
            }
            seq
        })
        .collect())
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn draw<T: Real>(probs: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.to_f64_lossy();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

fn binomial(n: u64, k: u64) -> BigUint {
    (0..k).fold(BigUint::one(), |acc, i| acc * BigUint::from(n - i) / BigUint::from(i + 1))
}

/// Unbiased pass@k: `1 - C(n-c, k) / C(n, k)`, evaluated exactly and rounded once.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n {
        return Err(Error::domain(format!("correct count {c} exceeds sample count {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::domain(format!("k must satisfy 1 <= k <= n, got k={k}, n={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss = Ratio::new(binomial(n - c, k), binomial(n, k));
    let value = Ratio::one() - miss;
    value
        .to_f64()
        .ok_or_else(|| Error::Invariant("pass@k not representable as f64".into()))
}
