//! Cross-entropy and token-level unlikelihood losses over logit vectors, their
//! closed-form gradients, the α-weighted combination, and a finite-difference
//! gradient checker.
//!
//! For a logit vector `z` with `p = softmax(z)` and target token `t`:
//!
//! * CE: `-log p_t`, gradient `p - onehot(t)`.
//! * UL: `-log(1 - p_t)`, gradient `p_t` at `t` and `-p_j · p_t / (1 - p_t)` elsewhere.
//!
//! `p_t` is clamped to at most `1 - UL_EPSILON` inside the unlikelihood terms; each
//! clamp is counted and reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ProbVector;
use crate::scalar::Real;

/// Upper clamp margin for the unlikelihood target probability.
pub const UL_EPSILON: f64 = 1e-12;

/// Default weight of the unlikelihood term.
pub const DEFAULT_ALPHA: f64 = 1e-4;

/// A finite logit vector of length at least 2.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector<T> {
    logits: Vec<T>,
}

impl<T: Real> LogitVector<T> {
    pub fn new(logits: Vec<T>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::domain(format!("logit vector needs V >= 2, got {}", logits.len())));
        }
        if let Some((i, z)) = logits.iter().enumerate().find(|(_, z)| !z.is_finite()) {
            return Err(Error::domain(format!("logit[{i}] = {z} is not finite")));
        }
        Ok(LogitVector { logits })
    }

    pub fn zeros(size: usize) -> Self {
        assert!(size >= 2, "vocabulary must have at least two entries");
        LogitVector {
            logits: vec![T::zero(); size],
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target < self.logits.len() {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "target index {target} out of range for V = {}",
                self.logits.len()
            )))
        }
    }
}

fn max_of<T: Real>(z: &[T]) -> T {
    z.iter().copied().fold(T::neg_infinity(), T::max)
}

/// `log Σ exp(z_j)` over all `j` (except `skip`, if given).
fn log_sum_exp<T: Real>(z: &[T], skip: Option<usize>) -> T {
    let m = z
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    let s: T = z
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    m + s.ln()
}

/// Max-shifted softmax.
pub fn softmax<T: Real>(z: &LogitVector<T>) -> ProbVector<T> {
    let z = z.as_slice();
    let m = max_of(z);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    ProbVector::from_normalized(e.into_iter().map(|v| v / s).collect())
}

/// `log p_t`, accurate both when `p_t` is small and when it is close to 1.
pub fn log_prob<T: Real>(z: &LogitVector<T>, target: usize) -> T {
    let zs = z.as_slice();
    let zt = zs[target];
    // log p_t = -log(1 + Σ_{j≠t} exp(z_j - z_t)) when t is the argmax
    if zs.iter().all(|&v| v <= zt) {
        let rest: T = zs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target)
            .map(|(_, &v)| (v - zt).exp())
            .sum();
        -rest.ln_1p()
    } else {
        zt - log_sum_exp(zs, None)
    }
}

/// `log(1 - p_t)` computed without forming `1 - p_t` by subtraction when `p_t`
/// is large, together with whether the `1 - ε` clamp was applied.
pub fn log_complement<T: Real>(z: &LogitVector<T>, target: usize) -> (T, bool) {
    let zs = z.as_slice();
    let lse_all = log_sum_exp(zs, None);
    let log_pt = zs[target] - lse_all;
    let value = if log_pt < T::lit(0.5f64.ln()) {
        (-log_pt.exp()).ln_1p()
    } else {
        log_sum_exp(zs, Some(target)) - lse_all
    };
    let floor = T::lit(UL_EPSILON.ln());
    if value < floor || value.is_nan() {
        (floor, true)
    } else {
        (value, false)
    }
}

/// Per-token cross-entropy `-log p_t`.
pub fn ce_token_loss<T: Real>(z: &LogitVector<T>, target: usize) -> Result<T> {
    z.check_target(target)?;
    Ok(-log_prob(z, target))
}

/// Per-token unlikelihood `-log(1 - p_t)`; the flag reports a clamp.
pub fn ul_token_loss<T: Real>(z: &LogitVector<T>, target: usize) -> Result<(T, bool)> {
    z.check_target(target)?;
    let (lc, clamped) = log_complement(z, target);
    Ok((-lc, clamped))
}

/// `p - onehot(target)`.
pub fn ce_grad<T: Real>(z: &LogitVector<T>, target: usize) -> Result<Vec<T>> {
    z.check_target(target)?;
    let mut g = softmax(z).into_inner();
    g[target] -= T::one();
    Ok(g)
}

/// Closed-form unlikelihood gradient with the clamp applied to the odds ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct UlGradient<T> {
    pub grad: Vec<T>,
    /// `p_t / (1 - p_t)` after clamping.
    pub odds_ratio: T,
    pub clamped: bool,
}

/// Unlikelihood gradient: `p_t` at the target, `-p_j · p_t/(1-p_t)` elsewhere.
pub fn ul_grad_detailed<T: Real>(z: &LogitVector<T>, target: usize) -> Result<UlGradient<T>> {
    z.check_target(target)?;
    let p = softmax(z).into_inner();
    let eps = T::lit(UL_EPSILON);
    // 1 - p_t as the sum of the other probabilities keeps precision for p_t near 1
    let rest: T = p
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, &v)| v)
        .sum();
    let (pt, complement, clamped) = if rest < eps {
        (T::one() - eps, eps, true)
    } else {
        (p[target], rest, false)
    };
    let odds = pt / complement;
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| if j == target { pt } else { -pj * odds })
        .collect();
    Ok(UlGradient {
        grad,
        odds_ratio: odds,
        clamped,
    })
}

pub fn ul_grad<T: Real>(z: &LogitVector<T>, target: usize) -> Result<Vec<T>> {
    ul_grad_detailed(z, target).map(|g| g.grad)
}

/// Whether a token is to be made more likely (CE) or less likely (UL).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Promote,
    Suppress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStep<T> {
    pub logits: LogitVector<T>,
    pub target: usize,
    pub mode: StepMode,
}

/// Token steps grouped into sequences. `boundaries[i]` is the end (exclusive)
/// of sequence `i`; the last boundary equals the number of steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenBatch<T> {
    steps: Vec<TokenStep<T>>,
    boundaries: Vec<usize>,
}

impl<T: Real> TokenBatch<T> {
    pub fn new() -> Self {
        TokenBatch {
            steps: Vec::new(),
            boundaries: Vec::new(),
        }
    }

    /// Appends one sequence; every step must have an in-range target.
    pub fn push_sequence(&mut self, steps: impl IntoIterator<Item = TokenStep<T>>) -> Result<()> {
        let start = self.steps.len();
        for step in steps {
            step.logits.check_target(step.target)?;
            self.steps.push(step);
        }
        if self.steps.len() > start {
            self.boundaries.push(self.steps.len());
        }
        Ok(())
    }

    pub fn steps(&self) -> &[TokenStep<T>] {
        &self.steps
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn count(&self, mode: StepMode) -> usize {
        self.steps.iter().filter(|s| s.mode == mode).count()
    }

    /// Step ranges of each sequence.
    pub fn sequences(&self) -> impl Iterator<Item = &[TokenStep<T>]> + '_ {
        let mut start = 0;
        self.boundaries.iter().map(move |&end| {
            let seq = &self.steps[start..end];
            start = end;
            seq
        })
    }
}

/// Mean cross-entropy over the batch's Promote steps.
pub fn ce_loss<T: Real>(batch: &TokenBatch<T>) -> Result<T> {
    let (sum, n) = batch
        .steps
        .iter()
        .filter(|s| s.mode == StepMode::Promote)
        .try_fold((T::zero(), 0usize), |(acc, n), s| {
            Ok::<_, Error>((acc + ce_token_loss(&s.logits, s.target)?, n + 1))
        })?;
    if n == 0 {
        return Err(Error::domain("cross-entropy over a batch without Promote steps"));
    }
    Ok(sum / T::lit(n as f64))
}

/// Mean unlikelihood loss over Suppress steps, with the number of clamped steps.
pub fn ul_loss_detailed<T: Real>(batch: &TokenBatch<T>) -> Result<(T, usize)> {
    let mut sum = T::zero();
    let (mut n, mut clamped) = (0usize, 0usize);
    for s in batch.steps.iter().filter(|s| s.mode == StepMode::Suppress) {
        let (l, c) = ul_token_loss(&s.logits, s.target)?;
        sum += l;
        n += 1;
        clamped += usize::from(c);
    }
    if n == 0 {
        return Err(Error::domain("unlikelihood over a batch without Suppress steps"));
    }
    Ok((sum / T::lit(n as f64), clamped))
}

pub fn ul_loss<T: Real>(batch: &TokenBatch<T>) -> Result<T> {
    ul_loss_detailed(batch).map(|(l, _)| l)
}

/// Loss components of a mixed batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub ce: T,
    pub ul: T,
    pub combined: T,
    pub promote_tokens: usize,
    pub suppress_tokens: usize,
    pub clamped: usize,
}

/// `ce_loss + alpha · ul_loss`; a mode absent from the batch contributes 0.
pub fn combined_loss_detailed<T: Real>(batch: &TokenBatch<T>, alpha: T) -> Result<LossBreakdown<T>> {
    if batch.is_empty() {
        return Err(Error::domain("combined loss over an empty batch"));
    }
    if !(alpha >= T::zero()) {
        return Err(Error::domain(format!("alpha must be >= 0, got {alpha}")));
    }
    let promote_tokens = batch.count(StepMode::Promote);
    let suppress_tokens = batch.count(StepMode::Suppress);
    let ce = if promote_tokens > 0 { ce_loss(batch)? } else { T::zero() };
    let (ul, clamped) = if suppress_tokens > 0 {
        ul_loss_detailed(batch)?
    } else {
        (T::zero(), 0)
    };
    Ok(LossBreakdown {
        ce,
        ul,
        combined: ce + alpha * ul,
        promote_tokens,
        suppress_tokens,
        clamped,
    })
}

pub fn combined_loss<T: Real>(batch: &TokenBatch<T>, alpha: T) -> Result<T> {
    combined_loss_detailed(batch, alpha).map(|b| b.combined)
}

/// Gradient of [`combined_loss`] with respect to every step's logits, in step order.
/// The second value counts clamped Suppress steps.
pub fn combined_grad<T: Real>(batch: &TokenBatch<T>, alpha: T) -> Result<(Vec<Vec<T>>, usize)> {
    let promote = batch.count(StepMode::Promote);
    let suppress = batch.count(StepMode::Suppress);
    let ce_scale = if promote > 0 { T::one() / T::lit(promote as f64) } else { T::zero() };
    let ul_scale = if suppress > 0 { alpha / T::lit(suppress as f64) } else { T::zero() };
    let mut clamped = 0;
    let grads = batch
        .steps
        .iter()
        .map(|s| {
            let (g, scale) = match s.mode {
                StepMode::Promote => (ce_grad(&s.logits, s.target)?, ce_scale),
                StepMode::Suppress => {
                    let d = ul_grad_detailed(&s.logits, s.target)?;
                    clamped += usize::from(d.clamped);
                    (d.grad, ul_scale)
                }
            };
            Ok(g.into_iter().map(|v| v * scale).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, clamped))
}

/// Which closed form [`grad_check`] validates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Ul,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "ul" => Ok(LossKind::Ul),
            other => Err(Error::Config(format!("unknown loss {other:?}; expected ce or ul"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub loss: LossKind,
    pub trials: usize,
    pub seed: u64,
    /// Central-difference step.
    pub h: f64,
    pub min_vocab: usize,
    pub max_vocab: usize,
    pub logit_range: f64,
    /// Trials whose target probability exceeds this are redrawn.
    pub max_p_target: Option<f64>,
    pub tolerance: f64,
}

impl GradCheckConfig {
    pub fn new(loss: LossKind, trials: usize, seed: u64) -> Self {
        GradCheckConfig {
            loss,
            trials,
            seed,
            h: 1e-5,
            min_vocab: 2,
            max_vocab: 64,
            logit_range: 10.0,
            max_p_target: None,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub trial: usize,
    pub vocab: usize,
    pub target: usize,
    pub p_target: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub trials: usize,
    pub seed: u64,
    pub h: f64,
    /// Max over trials of `max_j |analytic_j - numeric_j| / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub max_rel_error: f64,
    pub worst: Option<WorstCase>,
    /// Largest `|Σ_j grad_j|` seen.
    pub max_abs_sum: f64,
    pub clamped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn token_loss(kind: LossKind, z: &LogitVector<f64>, target: usize) -> f64 {
    match kind {
        LossKind::Ce => ce_token_loss(z, target).expect("target validated"),
        LossKind::Ul => ul_token_loss(z, target).expect("target validated").0,
    }
}

/// Central differences of the per-token loss. The step actually taken,
/// `(z+h) - (z-h)` in floating point, is used as the denominator.
pub fn numeric_grad(kind: LossKind, z: &LogitVector<f64>, target: usize, h: f64) -> Vec<f64> {
    let mut work = z.clone();
    (0..z.len())
        .map(|j| {
            let orig = z.as_slice()[j];
            let (up, down) = (orig + h, orig - h);
            work.as_mut_slice()[j] = up;
            let fu = token_loss(kind, &work, target);
            work.as_mut_slice()[j] = down;
            let fd = token_loss(kind, &work, target);
            work.as_mut_slice()[j] = orig;
            (fu - fd) / (up - down)
        })
        .collect()
}

/// Compares analytic gradients with central finite differences over random
/// logit vectors. Deterministic for a fixed seed.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.trials == 0 {
        return Err(Error::Config("grad-check needs at least one trial".into()));
    }
    if config.min_vocab < 2 || config.max_vocab < config.min_vocab {
        return Err(Error::Config("vocabulary range must satisfy 2 <= min <= max".into()));
    }
    if !(config.h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        loss: config.loss,
        trials: config.trials,
        seed: config.seed,
        h: config.h,
        max_rel_error: 0.0,
        worst: None,
        max_abs_sum: 0.0,
        clamped: 0,
        tolerance: config.tolerance,
        passed: false,
    };
    let mut trial = 0;
    while trial < config.trials {
        let (z, target) = random_case(&mut rng, config.min_vocab, config.max_vocab, config.logit_range);
        let p_target = softmax(&z).probs()[target];
        if config.max_p_target.is_some_and(|cap| p_target > cap) {
            continue;
        }
        let (analytic, clamped) = match config.loss {
            LossKind::Ce => (ce_grad(&z, target)?, false),
            LossKind::Ul => {
                let d = ul_grad_detailed(&z, target)?;
                (d.grad, d.clamped)
            }
        };
        report.max_abs_sum = report.max_abs_sum.max(analytic.iter().sum::<f64>().abs());
        if clamped {
            report.clamped += 1;
            trial += 1;
            continue;
        }
        let numeric = numeric_grad(config.loss, &z, target, config.h);
        let rel = relative_error(&analytic, &numeric);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(WorstCase {
                trial,
                vocab: z.len(),
                target,
                p_target,
                rel_error: rel,
            });
        }
        trial += 1;
    }
    report.passed = report.max_rel_error < config.tolerance;
    Ok(report)
}

/// Draws `V` uniformly in `[min_vocab, max_vocab]`, logits uniformly in
/// `[-range, range]` and a uniform target.
pub fn random_case(
    rng: &mut impl Rng,
    min_vocab: usize,
    max_vocab: usize,
    range: f64,
) -> (LogitVector<f64>, usize) {
    let v = rng.gen_range(min_vocab..=max_vocab);
    let logits = (0..v).map(|_| rng.gen_range(-range..=range)).collect();
    let target = rng.gen_range(0..v);
    (LogitVector::new(logits).expect("finite logits"), target)
}

/// `max_j |a_j - b_j| / max(‖a‖∞, ‖b‖∞)` (0 when both are zero).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
