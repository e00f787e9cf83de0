//! Tabular autoregressive toy model used to watch policy entropy under the
//! cross-entropy and combined objectives.
//!
//! Each context (the last `n` tokens, left-padded with a start symbol) owns a
//! logit vector; the next-token distribution is its softmax, so gradients with
//! respect to the parameters are exactly the per-step logit gradients from
//! [`crate::objective`].

mod eval;
mod model;
mod task;
mod train;

pub use eval::{pass_at_k, rollout};
pub use model::{Context, ToyModel};
pub use task::{Bias, TaskPrompt, ToyTask, DEMO_ALPHA, DEMO_LOW_PPL, DEMO_STEPS, DEMO_STEP_SIZE};
pub use train::{train, trace_to_csv, EntropyProbe, Objective, TraceRow, TrainConfig};
