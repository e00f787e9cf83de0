//! Offline curation: verify, score, split, select, and write the promotion and
//! suppression sets with an audit manifest.
//!
//! Every stage is exposed on its own so the CLI subcommands and [`run_pipeline`]
//! share one implementation.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::perplexity;
use crate::objective::DEFAULT_ALPHA;
use crate::record::{read_corpus, record_to_line, Corpus, TrajectoryRecord};
use crate::sampler::{select_extreme, select_promotion, Direction, GaussianTarget, SamplerOptions};
use crate::verify::verify_record;

pub const PROMOTE_FILE: &str = "promote.jsonl";
pub const SUPPRESS_FILE: &str = "suppress.jsonl";
pub const REPORT_FILE: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

/// Candidate PPL intervals compared in the preliminary interval experiments.
pub const DEFAULT_SWEEP_INTERVALS: [(f64, f64); 3] = [(2.0, 2.5), (2.5, 3.0), (2.5, 3.5)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuppressConfig {
    pub count: usize,
    pub direction: Direction,
    pub max_per_query: usize,
}

impl Default for SuppressConfig {
    fn default() -> Self {
        SuppressConfig {
            count: 50_000,
            direction: Direction::LowestPpl,
            max_per_query: 1,
        }
    }
}

/// Run-level settings. Loaded from JSON; missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: PathBuf,
    /// Separate corpus of self-generated rollouts to draw suppression data from.
    pub incorrect_input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub target: GaussianTarget,
    pub sampler: SamplerOptions,
    pub suppress: SuppressConfig,
    /// Unlikelihood weight for the downstream trainer; recorded, not used here.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: PathBuf::new(),
            incorrect_input: None,
            output_dir: PathBuf::new(),
            target: GaussianTarget::default(),
            sampler: SamplerOptions::default(),
            suppress: SuppressConfig::default(),
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn inputs(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.input).chain(self.incorrect_input.as_ref())
    }

    /// Checks values and that no input lives inside the output directory.
    pub fn validate(&self) -> Result<()> {
        if self.input.as_os_str().is_empty() {
            return Err(Error::Config("input path is required".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output directory is required".into()));
        }
        self.target.validate()?;
        if self.suppress.count == 0 || self.suppress.max_per_query == 0 {
            return Err(Error::Config("suppression count and max_per_query must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        check_output_dir(&self.output_dir, self.inputs())
    }
}

fn check_output_dir<'a>(output_dir: &Path, inputs: impl Iterator<Item = &'a PathBuf>) -> Result<()> {
    let out = match output_dir.canonicalize() {
        Ok(p) => p,
        // a directory that does not exist yet cannot contain the inputs
        Err(_) => return Ok(()),
    };
    for input in inputs {
        let input = input.canonicalize().map_err(|e| Error::io(input, e))?;
        if input.starts_with(&out) {
            return Err(Error::Config(format!(
                "input {} lies inside the output directory {}",
                input.display(),
                out.display()
            )));
        }
    }
    Ok(())
}

/// Fills `verified` from the gold answer. Without a gold answer an existing
/// `verified` value is kept; with neither, the record is rejected.
pub fn verify_stage(record: &TrajectoryRecord) -> Result<TrajectoryRecord> {
    match (&record.gold_answer, record.verified) {
        (Some(_), _) => verify_record(record),
        (None, Some(_)) => Ok(record.clone()),
        (None, None) => Err(Error::Precondition {
            stage: "verify",
            id: record.id.clone(),
            message: "neither gold_answer nor verified is present".into(),
        }),
    }
}

/// Sets `ppl` and `length` from `token_logprobs`. Records without logprobs must
/// already carry `ppl`.
pub fn ppl_stage(record: &TrajectoryRecord) -> Result<TrajectoryRecord> {
    let fail = |message: String| Error::Precondition {
        stage: "ppl",
        id: record.id.clone(),
        message,
    };
    match (&record.token_logprobs, record.ppl) {
        (Some(lps), _) => {
            let ppl = perplexity(lps).map_err(|e| fail(e.to_string()))?;
            let mut out = record.clone();
            out.ppl = Some(ppl);
            out.length = Some(lps.len() as u64);
            Ok(out)
        }
        (None, Some(_)) => Ok(record.clone()),
        (None, None) => Err(fail("neither token_logprobs nor ppl is present".into())),
    }
}

/// Splits on `verified`; every record must have it.
pub fn split_by_verified(corpus: &Corpus) -> Result<(Corpus, Corpus)> {
    if let Some(r) = corpus.iter().find(|r| r.verified.is_none()) {
        return Err(Error::Precondition {
            stage: "split",
            id: r.id.clone(),
            message: "verified is missing".into(),
        });
    }
    Ok((
        corpus.filter(|r| r.verified == Some(true)),
        corpus.filter(|r| r.verified == Some(false)),
    ))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn corpus_to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for r in corpus {
        out.push_str(&record_to_line(r));
        out.push('\n');
    }
    out
}

/// Reads a corpus file, returning it with the digest of its bytes.
pub fn load_with_digest(path: &Path) -> Result<(Corpus, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = sha256_hex(&bytes);
    let corpus = read_corpus(bytes.as_slice()).map_err(|e| match e {
        Error::MalformedLine { line, message } => Error::MalformedLine {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })?;
    Ok((corpus, digest))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub verified_correct: usize,
    pub verified_incorrect: usize,
    pub promote_out_of_range: usize,
    pub promote_target: usize,
    pub promote_selected: usize,
    /// Failed-verification records eligible for suppression.
    pub suppress_supply: usize,
    /// Suppression candidates dropped because they duplicate a promoted record.
    pub suppress_collisions: usize,
    pub suppress_selected: usize,
    /// Distinct queries present in both output sets.
    pub query_overlap: usize,
}

/// Config as recorded in the manifest; the output location is left out so the
/// manifest depends only on inputs and settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedConfig {
    pub input: PathBuf,
    pub incorrect_input: Option<PathBuf>,
    pub target: GaussianTarget,
    pub sampler: SamplerOptions,
    pub suppress: SuppressConfig,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RecordedConfig,
    pub inputs: Vec<InputDigest>,
    pub counts: StageCounts,
    pub outputs: Vec<InputDigest>,
    pub notes: Vec<String>,
}

/// In-memory result of a pipeline run, before anything is written.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub promote: Corpus,
    pub suppress: Corpus,
    pub report_csv: String,
    pub manifest: Manifest,
}

fn prepare(corpus: &Corpus) -> Result<Corpus> {
    corpus.try_map(verify_stage)?.try_map(ppl_stage)
}

/// Runs every stage in memory.
pub fn curate(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let (raw, raw_digest) = load_with_digest(&config.input)?;
    let mut inputs = vec![InputDigest {
        path: config.input.clone(),
        sha256: raw_digest,
        records: raw.len(),
    }];
    let scored = prepare(&raw)?;
    let (correct, incorrect) = split_by_verified(&scored)?;

    let promotion = select_promotion(&correct, &config.target, config.sampler)?;
    let promote = promotion.selected;

    let failures = match &config.incorrect_input {
        Some(path) => {
            let (extra, digest) = load_with_digest(path)?;
            inputs.push(InputDigest {
                path: path.clone(),
                sha256: digest,
                records: extra.len(),
            });
            split_by_verified(&prepare(&extra)?)?.1
        }
        None => incorrect.clone(),
    };
    let promoted_ids: HashSet<&str> = promote.iter().map(|r| r.id.as_str()).collect();
    let promoted_pairs: HashSet<(&str, &str)> =
        promote.iter().map(|r| (r.query.as_str(), r.response.as_str())).collect();
    let pool = failures.filter(|r| {
        !promoted_ids.contains(r.id.as_str()) && !promoted_pairs.contains(&(r.query.as_str(), r.response.as_str()))
    });
    let suppress = if pool.is_empty() {
        Corpus::empty()
    } else {
        select_extreme(&pool, config.suppress.count, config.suppress.direction, config.suppress.max_per_query)?
    };

    let promoted_queries: HashSet<&str> = promote.iter().map(|r| r.query.as_str()).collect();
    let suppressed_queries: HashSet<&str> = suppress.iter().map(|r| r.query.as_str()).collect();
    let counts = StageCounts {
        verified_correct: correct.len(),
        verified_incorrect: incorrect.len(),
        promote_out_of_range: promotion.discarded,
        promote_target: promotion.allocation.total_target(),
        promote_selected: promote.len(),
        suppress_supply: pool.len(),
        suppress_collisions: failures.len() - pool.len(),
        suppress_selected: suppress.len(),
        query_overlap: promoted_queries.intersection(&suppressed_queries).count(),
    };
    let mut notes = Vec::new();
    if counts.suppress_supply == 0 {
        notes.push("suppression supply is zero; suppress.jsonl is empty".to_string());
    }
    if counts.promote_selected < config.target.total {
        notes.push(format!(
            "promotion selected {} of the requested {}",
            counts.promote_selected, config.target.total
        ));
    }
    if counts.suppress_selected < config.suppress.count {
        notes.push(format!(
            "suppression selected {} of the requested {}",
            counts.suppress_selected, config.suppress.count
        ));
    }

    let report_csv = promotion.allocation.to_csv();
    let manifest = Manifest {
        config: RecordedConfig {
            input: config.input.clone(),
            incorrect_input: config.incorrect_input.clone(),
            target: config.target.clone(),
            sampler: config.sampler,
            suppress: config.suppress.clone(),
            alpha: config.alpha,
            seed: config.seed,
        },
        inputs,
        counts,
        outputs: Vec::new(),
        notes,
    };
    Ok(PipelineOutput {
        promote,
        suppress,
        report_csv,
        manifest,
    })
}

/// Writes `files` into `dir` through temporary names, renaming only after every
/// write succeeded. On failure nothing new is left behind.
fn write_all_or_nothing<N: AsRef<str>>(dir: &Path, files: &[(N, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = |name: &str| dir.join(format!(".{name}.partial"));
    let cleanup = || {
        for (name, _) in files {
            let _ = fs::remove_file(tmp(name.as_ref()));
        }
    };
    for (name, bytes) in files {
        let name = name.as_ref();
        if let Err(e) = fs::write(tmp(name), bytes) {
            cleanup();
            return Err(Error::io(dir.join(name), e));
        }
    }
    for (i, (name, _)) in files.iter().enumerate() {
        let name = name.as_ref();
        if let Err(e) = fs::rename(tmp(name), dir.join(name)) {
            cleanup();
            for (done, _) in &files[..i] {
                let _ = fs::remove_file(dir.join(done.as_ref()));
            }
            return Err(Error::io(dir.join(name), e));
        }
    }
    Ok(())
}

/// Full curation run; writes the four output files and returns the manifest.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest> {
    let PipelineOutput {
        promote,
        suppress,
        report_csv,
        mut manifest,
    } = curate(config)?;
    let promote = corpus_to_jsonl(&promote).into_bytes();
    let suppress = corpus_to_jsonl(&suppress).into_bytes();
    let report = report_csv.into_bytes();
    manifest.outputs = [
        (PROMOTE_FILE, &promote, manifest.counts.promote_selected),
        (SUPPRESS_FILE, &suppress, manifest.counts.suppress_selected),
    ]
    .into_iter()
        .map(|(name, bytes, records)| InputDigest {
            path: PathBuf::from(name),
            sha256: sha256_hex(bytes),
            records,
        })
        .collect();
    let mut manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Invariant(format!("manifest serialization: {e}")))?;
    manifest_json.push('\n');
    write_all_or_nothing(
        &config.output_dir,
        &[
            (PROMOTE_FILE, promote),
            (SUPPRESS_FILE, suppress),
            (REPORT_FILE, report),
            (MANIFEST_FILE, manifest_json.into_bytes()),
        ],
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSelection {
    pub low: f64,
    pub high: f64,
    /// Records with `low <= ppl < high`.
    pub candidates: usize,
    pub selected: Corpus,
}

impl IntervalSelection {
    pub fn mean_ppl(&self) -> Option<f64> {
        if self.selected.is_empty() {
            return None;
        }
        let sum: f64 = self.selected.iter().filter_map(|r| r.ppl).sum();
        Some(sum / self.selected.len() as f64)
    }
}

/// For each half-open interval `[low, high)`, the longest records first (ties by
/// id), at most `max_per_query` per query, up to `count`. Intervals are
/// independent of each other and may overlap.
pub fn sweep_ppl_intervals(
    corpus: &Corpus,
    intervals: &[(f64, f64)],
    count: usize,
    max_per_query: usize,
) -> Result<Vec<IntervalSelection>> {
    if count == 0 || max_per_query == 0 {
        return Err(Error::Config("sweep count and max_per_query must be positive".into()));
    }
    for &(low, high) in intervals {
        if !(low >= 1.0 && low <= high) || low.is_nan() || high.is_nan() {
            return Err(Error::Config(format!(
                "interval [{low}, {high}) must satisfy 1 <= low <= high"
            )));
        }
    }
    let mut ranked: Vec<(f64, u64, &TrajectoryRecord)> = corpus
        .iter()
        .map(|r| {
            let need = |field: &str| Error::Precondition {
                stage: "sweep",
                id: r.id.clone(),
                message: format!("{field} is missing"),
            };
            Ok((r.ppl.ok_or_else(|| need("ppl"))?, r.length.ok_or_else(|| need("length"))?, r))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.2.id.cmp(&b.2.id)));
    intervals
        .iter()
        .map(|&(low, high)| {
            let mut per_query = std::collections::HashMap::<&str, usize>::new();
            let mut candidates = 0;
            let mut picked = Vec::new();
            for &(ppl, _, r) in &ranked {
                if !(low <= ppl && ppl < high) {
                    continue;
                }
                candidates += 1;
                if picked.len() < count {
                    let c = per_query.entry(r.query.as_str()).or_insert(0);
                    if *c < max_per_query {
                        *c += 1;
                        picked.push(r.clone());
                    }
                }
            }
            Ok(IntervalSelection {
                low,
                high,
                candidates,
                selected: Corpus::from_records(picked)?,
            })
        })
        .collect()
}

/// File name of the `index`-th interval's selection.
pub fn sweep_file_name(index: usize) -> String {
    format!("interval_{index}.jsonl")
}

/// `index,low,high,candidates,selected,mean_ppl,file`; `mean_ppl` is empty for
/// an empty selection.
pub fn sweep_summary_csv(selections: &[IntervalSelection]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "low", "high", "candidates", "selected", "mean_ppl", "file"])
        .expect("in-memory write");
    for (i, s) in selections.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.low.to_string(),
            s.high.to_string(),
            s.candidates.to_string(),
            s.selected.len().to_string(),
            s.mean_ppl().map(|m| m.to_string()).unwrap_or_default(),
            sweep_file_name(i),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}

/// Loads the input, verifies and scores it, sweeps the verified-correct records
/// with `target.total` as the per-interval budget and `target.max_per_query` as
/// the cap, and writes one JSONL per interval plus the summary.
pub fn run_sweep(config: &PipelineConfig, intervals: &[(f64, f64)]) -> Result<Vec<IntervalSelection>> {
    config.validate()?;
    let (raw, _) = load_with_digest(&config.input)?;
    let (correct, _) = split_by_verified(&prepare(&raw)?)?;
    let selections = sweep_ppl_intervals(&correct, intervals, config.target.total, config.target.max_per_query)?;
    let mut files: Vec<(String, Vec<u8>)> = selections
        .iter()
        .enumerate()
        .map(|(i, s)| (sweep_file_name(i), corpus_to_jsonl(&s.selected).into_bytes()))
        .collect();
    files.push((SWEEP_SUMMARY_FILE.to_string(), sweep_summary_csv(&selections).into_bytes()));
    write_all_or_nothing(&config.output_dir, &files)?;
    Ok(selections)
}
