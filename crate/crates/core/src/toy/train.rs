use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_sequence_entropy, ProbVector};
use crate::objective::{combined_grad, combined_loss_detailed, StepMode, TokenBatch, TokenStep};
use crate::scalar::Real;

use super::eval::rollout;
use super::model::{Context, ToyModel};
use super::task::ToyTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on correct sequences only.
    CeOnly,
    /// Cross-entropy on correct sequences plus α-weighted unlikelihood on incorrect ones.
    OxaFull,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Objective::CeOnly),
            "oxa" => Ok(Objective::OxaFull),
            other => Err(Error::Config(format!("unknown objective {other:?}; expected ce or oxa"))),
        }
    }
}

/// How the per-step entropy in the trace is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EntropyProbe {
    /// Distributions along the argmax rollout of each prompt.
    Greedy,
    /// Distributions along `samples` sampled rollouts per prompt.
    Sampled { samples: usize, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub alpha: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub probe: EntropyProbe,
}

impl TrainConfig {
    pub fn new(objective: Objective, alpha: f64, steps: usize, step_size: f64) -> Self {
        TrainConfig {
            objective,
            alpha,
            steps,
            step_size,
            seed: 0,
            probe: EntropyProbe::Greedy,
        }
    }
}

/// Row `step` describes the model after `step` updates (row 0 is the initial model).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss_ce: f64,
    pub loss_ul: f64,
    pub loss_combined: f64,
    pub mean_entropy: f64,
}

/// Full batch with the context of every step, correct sequences first.
fn build_batch<T: Real>(model: &ToyModel<T>, task: &ToyTask) -> Result<(TokenBatch<T>, Vec<Context>)> {
    let mut batch = TokenBatch::new();
    let mut contexts = Vec::new();
    let labelled = task.prompts.iter().flat_map(|p| {
        p.correct
            .iter()
            .map(move |s| (&p.prompt, s, StepMode::Promote))
            .chain(p.incorrect.iter().map(move |s| (&p.prompt, s, StepMode::Suppress)))
    });
    for (prompt, seq, mode) in labelled {
        let mut steps = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let ctx = model.context(prompt, &seq[..t]);
            steps.push(TokenStep {
                logits: model.logits(&ctx),
                target: seq[t] as usize,
                mode,
            });
            contexts.push(ctx);
        }
        batch.push_sequence(steps)?;
    }
    Ok((batch, contexts))
}

fn probe_entropy<T: Real>(model: &ToyModel<T>, task: &ToyTask, probe: EntropyProbe, seed: u64) -> Result<T> {
    let mut dists: Vec<ProbVector<T>> = Vec::new();
    for (i, p) in task.prompts.iter().enumerate() {
        match probe {
            EntropyProbe::Greedy => dists.extend(model.greedy(&p.prompt, task.max_len).1),
            EntropyProbe::Sampled { samples, temperature } => {
                let seqs = rollout(model, &p.prompt, samples, temperature, task.max_len, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
                for s in seqs {
                    for t in 0..s.len() {
                        dists.push(model.distribution(&model.context(&p.prompt, &s[..t])));
                    }
                }
            }
        }
    }
    mean_sequence_entropy(&dists)
}

fn trace_row<T: Real>(
    model: &ToyModel<T>,
    task: &ToyTask,
    cfg: &TrainConfig,
    alpha: T,
    step: usize,
) -> Result<(TraceRow, TokenBatch<T>, Vec<Context>)> {
    let (batch, contexts) = build_batch(model, task)?;
    let losses = combined_loss_detailed(&batch, alpha)?;
    let entropy = probe_entropy(model, task, cfg.probe, cfg.seed.wrapping_add(step as u64))?;
    let row = TraceRow {
        step,
        loss_ce: losses.ce.to_f64_lossy(),
        loss_ul: losses.ul.to_f64_lossy(),
        loss_combined: losses.combined.to_f64_lossy(),
        mean_entropy: entropy.to_f64_lossy(),
    };
    if ![row.loss_ce, row.loss_ul, row.loss_combined, row.mean_entropy]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::Invariant(format!("non-finite loss or entropy at step {step}: {row:?}")));
    }
    Ok((row, batch, contexts))
}

/// Full-batch gradient descent on the logit table.
///
/// Returns the trained model and `steps + 1` trace rows. The UL loss is always
/// reported; under [`Objective::CeOnly`] its weight in the combined loss and the
/// gradient is zero.
pub fn train<T: Real>(
    model: &ToyModel<T>,
    task: &ToyTask,
    cfg: &TrainConfig,
) -> Result<(ToyModel<T>, Vec<TraceRow>)> {
    task.validate()?;
    if cfg.steps == 0 {
        return Err(Error::domain("steps must be at least 1"));
    }
    if !(cfg.step_size.is_finite() && cfg.step_size > 0.0) {
        return Err(Error::domain(format!("step size must be positive, got {}", cfg.step_size)));
    }
    if !(cfg.alpha.is_finite() && cfg.alpha >= 0.0) {
        return Err(Error::domain(format!("alpha must be >= 0, got {}", cfg.alpha)));
    }
    if task.prompts.iter().all(|p| p.correct.is_empty() && p.incorrect.is_empty()) {
        return Err(Error::domain("task has no labelled sequences"));
    }
    if model.vocab_size() != task.vocab_size || model.context_order() != task.context_order {
        return Err(Error::domain("model shape does not match the task"));
    }
    let alpha = match cfg.objective {
        Objective::CeOnly => T::zero(),
        Objective::OxaFull => T::lit(cfg.alpha),
    };
    let lr = T::lit(cfg.step_size);
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (row, batch, contexts) = trace_row(&model, task, cfg, alpha, step)?;
        trace.push(row);
        if step == cfg.steps {
            break;
        }
        let (grads, _) = combined_grad(&batch, alpha)?;
        let mut accumulated: BTreeMap<&Context, Vec<T>> = BTreeMap::new();
        for (ctx, g) in contexts.iter().zip(grads) {
            let acc = accumulated.entry(ctx).or_insert_with(|| vec![T::zero(); g.len()]);
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
        for (ctx, g) in accumulated {
            let logits = model.logits_mut(ctx);
            logits.as_mut_slice().iter_mut().zip(g).for_each(|(z, v)| *z -= lr * v);
        }
    }
    Ok((model, trace))
}

/// `step,loss_ce,loss_ul,loss_combined,mean_entropy` with a header line.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in trace {
        w.serialize(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}
