use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::model::ToyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub prompt: Vec<u32>,
    #[serde(default)]
    pub correct: Vec<Vec<u32>>,
    #[serde(default)]
    pub incorrect: Vec<Vec<u32>>,
}

/// Initial logit offset applied along one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bias {
    pub prompt: Vec<u32>,
    pub sequence: Vec<u32>,
    pub boost: f64,
}

/// Prompts with correct and incorrect continuations, plus the initial model shape.
///
/// Stored as JSON:
/// `{"vocab_size": 16, "context_order": 2, "max_len": 2, "prompts": [...], "biases": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub vocab_size: usize,
    pub context_order: usize,
    /// Length of the rollouts used to measure entropy.
    pub max_len: usize,
    pub prompts: Vec<TaskPrompt>,
    #[serde(default)]
    pub biases: Vec<Bias>,
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::domain("task has no prompts"));
        }
        if self.max_len == 0 {
            return Err(Error::domain("max_len must be positive"));
        }
        let in_vocab = |s: &[u32]| s.iter().all(|&t| (t as usize) < self.vocab_size);
        for (i, p) in self.prompts.iter().enumerate() {
            let all = std::iter::once(&p.prompt).chain(&p.correct).chain(&p.incorrect);
            if !all.into_iter().all(|s| in_vocab(s)) {
                return Err(Error::domain(format!("prompt {i}: token outside the vocabulary")));
            }
            let correct: HashSet<&Vec<u32>> = p.correct.iter().collect();
            if p.incorrect.iter().any(|s| correct.contains(s)) {
                return Err(Error::domain(format!("prompt {i}: a sequence is both correct and incorrect")));
            }
            if p.correct.iter().chain(&p.incorrect).any(Vec::is_empty) {
                return Err(Error::domain(format!("prompt {i}: empty continuation")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let task: ToyTask =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("task file: {e}")))?;
        task.validate()?;
        Ok(task)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Uniform model of the task's shape with the biases applied.
    pub fn initial_model<T: Real>(&self) -> Result<ToyModel<T>> {
        let mut model = ToyModel::uniform(self.vocab_size, self.context_order)?;
        for b in &self.biases {
            model.boost(&b.prompt, &b.sequence, T::lit(b.boost))?;
        }
        Ok(model)
    }

    /// Same prompts, keeping only the correct sequences accepted by `keep`.
    pub fn with_correct_filtered(&self, mut keep: impl FnMut(&[u32], &[u32]) -> bool) -> ToyTask {
        let mut out = self.clone();
        for p in &mut out.prompts {
            let prompt = p.prompt.clone();
            p.correct.retain(|s| keep(&prompt, s));
        }
        out
    }
}

/// Unlikelihood weight for the demo task. The initial odds ratio of its
/// suppressed tokens is about 27, so 0.05 keeps `alpha * odds` near one.
pub const DEMO_ALPHA: f64 = 0.05;
pub const DEMO_STEP_SIZE: f64 = 0.1;
pub const DEMO_STEPS: usize = 500;
/// Correct demo sequences below this initial perplexity form the low-perplexity arm.
pub const DEMO_LOW_PPL: f64 = 2.0;

impl ToyTask {
    /// Eight prompts over a 16-token vocabulary with two-token answers.
    ///
    /// Prompts 0..4 are hard: the model starts out confident in the wrong
    /// answer `[8, 9]` and must learn `[10, 11]`. Prompts 4..8 are easy: the
    /// correct `[12, 13]` is already likely and `[14, 15]` is the wrong answer.
    pub fn entropy_demo() -> ToyTask {
        let mut prompts = Vec::new();
        let mut biases = Vec::new();
        for h in 0..4u32 {
            prompts.push(TaskPrompt { prompt: vec![h], correct: vec![vec![10, 11]], incorrect: vec![vec![8, 9]] });
            biases.push(Bias { prompt: vec![h], sequence: vec![8, 9], boost: 6.0 });
        }
        for e in 4..8u32 {
            prompts.push(TaskPrompt { prompt: vec![e], correct: vec![vec![12, 13]], incorrect: vec![vec![14, 15]] });
            biases.push(Bias { prompt: vec![e], sequence: vec![12, 13], boost: 6.0 });
        }
        ToyTask { vocab_size: 16, context_order: 2, max_len: 2, prompts, biases }
    }
}
