//! `oxa`: command-line front end for curation, gradient checks and toy training.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error, 3 internal invariant
//! violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oxa_core::objective::{grad_check, GradCheckConfig, LossKind};
use oxa_core::pipeline::{
    corpus_to_jsonl, load_with_digest, ppl_stage, run_pipeline, run_sweep, split_by_verified, verify_stage,
    PipelineConfig, DEFAULT_SWEEP_INTERVALS, MANIFEST_FILE,
};
use oxa_core::record::Corpus;
use oxa_core::sampler::{select_extreme, select_promotion, Direction, UNBOUNDED};
use oxa_core::toy::{train, trace_to_csv, EntropyProbe, Objective, ToyTask, TrainConfig, DEMO_ALPHA, DEMO_STEPS, DEMO_STEP_SIZE};
use oxa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "oxa", version, about = "Exploration-aware data curation and objective tooling")]
struct Cli {
    /// JSON config file; explicit flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fill `verified` by comparing each boxed answer with its gold answer.
    Verify(StageIo),
    /// Fill `ppl` and `length` from `token_logprobs`.
    Ppl(StageIo),
    /// Gaussian-guided selection over verified-correct records.
    SelectPromote {
        #[command(flatten)]
        io: StageIo,
        #[command(flatten)]
        target: TargetArgs,
        /// Write the per-bin audit table here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Lowest- (or highest-) perplexity selection over failed records.
    SelectSuppress {
        #[command(flatten)]
        io: StageIo,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_parser = parse_cap)]
        max_per_query: Option<usize>,
        /// lowest or highest
        #[arg(long)]
        direction: Option<Direction>,
    },
    /// Length-prioritized selection within each PPL interval.
    Sweep {
        #[command(flatten)]
        paths: RunPaths,
        /// Half-open interval LOW:HIGH; repeat for several. Defaults to 2.0:2.5, 2.5:3.0, 2.5:3.5.
        #[arg(long = "interval", value_parser = parse_interval)]
        intervals: Vec<(f64, f64)>,
        /// Records per interval.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_parser = parse_cap)]
        max_per_query: Option<usize>,
    },
    /// Compare analytical gradients against central finite differences.
    GradCheck {
        /// ce or ul
        #[arg(long, default_value = "ce")]
        loss: LossKind,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Train the tabular toy model and write the loss/entropy trace.
    TrainToy {
        /// ce or oxa
        #[arg(long, default_value = "oxa")]
        objective: Objective,
        #[arg(long, default_value_t = DEMO_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = DEMO_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = DEMO_STEP_SIZE)]
        step_size: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Task JSON; the built-in demo task when omitted.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Measure entropy on this many sampled rollouts per prompt instead of the greedy one.
        #[arg(long)]
        probe_samples: Option<usize>,
    },
    /// verify, ppl, split, select-promote and select-suppress in one go.
    Run {
        #[command(flatten)]
        paths: RunPaths,
        /// Separate corpus to draw suppression data from.
        #[arg(long)]
        incorrect_input: Option<PathBuf>,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long)]
        suppress_count: Option<usize>,
        #[arg(long, value_parser = parse_cap)]
        suppress_max_per_query: Option<usize>,
        #[arg(long)]
        suppress_direction: Option<Direction>,
        /// Recorded in the manifest for the downstream trainer.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct StageIo {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct RunPaths {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    ppl_min: Option<f64>,
    #[arg(long)]
    ppl_max: Option<f64>,
    #[arg(long)]
    bin_width: Option<f64>,
    #[arg(long)]
    total: Option<usize>,
    /// Positive integer, or `inf` for no cap.
    #[arg(long, value_parser = parse_cap)]
    max_per_query: Option<usize>,
    /// Keep the floored bin targets without handing out the remainder.
    #[arg(long)]
    no_remainder_topup: bool,
    /// Move quota from under-supplied bins to bins with spare candidates.
    #[arg(long)]
    redistribute: bool,
}

impl TargetArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let t = &mut cfg.target;
        set(&mut t.mu, self.mu);
        set(&mut t.sigma, self.sigma);
        set(&mut t.p_min, self.ppl_min);
        set(&mut t.p_max, self.ppl_max);
        set(&mut t.bin_width, self.bin_width);
        set(&mut t.total, self.total);
        set(&mut t.max_per_query, self.max_per_query);
        if self.no_remainder_topup {
            cfg.sampler.remainder_topup = false;
        }
        if self.redistribute {
            cfg.sampler.redistribute = true;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_cap(s: &str) -> std::result::Result<usize, String> {
    match s {
        "inf" | "none" | "unbounded" => Ok(UNBOUNDED),
        _ => match s.parse::<usize>() {
            Ok(0) => Err("must be positive".into()),
            Ok(n) => Ok(n),
            Err(e) => Err(format!("expected a positive integer or inf: {e}")),
        },
    }
}

fn parse_interval(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LOW:HIGH")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    Ok((lo, hi))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn read_stage_input(io: &StageIo) -> Result<Corpus> {
    if same_file(&io.input, &io.output) {
        return Err(Error::Config("output must differ from input".into()));
    }
    Ok(load_with_digest(&io.input)?.0)
}

fn write_corpus_file(path: &Path, corpus: &Corpus) -> Result<()> {
    write_file(path, corpus_to_jsonl(corpus))
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Verify(io) => {
            let out = read_stage_input(&io)?.try_map(verify_stage)?;
            write_corpus_file(&io.output, &out)?;
            let passed = out.iter().filter(|r| r.verified == Some(true)).count();
            eprintln!("verified {} records: {passed} correct", out.len());
        }
        Command::Ppl(io) => {
            let out = read_stage_input(&io)?.try_map(ppl_stage)?;
            write_corpus_file(&io.output, &out)?;
            eprintln!("scored {} records", out.len());
        }
        Command::SelectPromote { io, target, report } => {
            target.apply(&mut cfg);
            let (correct, _) = split_by_verified(&read_stage_input(&io)?)?;
            let sel = select_promotion(&correct, &cfg.target, cfg.sampler)?;
            write_corpus_file(&io.output, &sel.selected)?;
            if let Some(path) = report {
                write_file(&path, sel.allocation.to_csv())?;
            }
            eprintln!(
                "promoted {} of {} verified-correct records (target {}, {} out of range)",
                sel.selected.len(),
                correct.len(),
                sel.allocation.total_target(),
                sel.discarded
            );
        }
        Command::SelectSuppress { io, count, max_per_query, direction } => {
            set(&mut cfg.suppress.count, count);
            set(&mut cfg.suppress.max_per_query, max_per_query);
            set(&mut cfg.suppress.direction, direction);
            let (_, failed) = split_by_verified(&read_stage_input(&io)?)?;
            let sel = if failed.is_empty() {
                Corpus::empty()
            } else {
                let s = &cfg.suppress;
                select_extreme(&failed, s.count, s.direction, s.max_per_query)?
            };
            write_corpus_file(&io.output, &sel)?;
            eprintln!("selected {} of {} failed records", sel.len(), failed.len());
        }
        Command::Sweep { paths, intervals, count, max_per_query } => {
            set(&mut cfg.input, paths.input);
            set(&mut cfg.output_dir, paths.output_dir);
            set(&mut cfg.target.total, count);
            set(&mut cfg.target.max_per_query, max_per_query);
            let intervals = if intervals.is_empty() { DEFAULT_SWEEP_INTERVALS.to_vec() } else { intervals };
            for (i, s) in run_sweep(&cfg, &intervals)?.iter().enumerate() {
                println!(
                    "[{}, {}): {} candidates, {} selected{}",
                    s.low,
                    s.high,
                    s.candidates,
                    s.selected.len(),
                    if s.selected.is_empty() { " (empty)".to_string() } else { format!(" -> interval_{i}.jsonl") }
                );
            }
        }
        Command::GradCheck { loss, trials, seed, h } => {
            let mut gc = GradCheckConfig::new(loss, trials, seed);
            gc.h = h;
            let report = grad_check(&gc)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Error::Invariant(e.to_string()))?
            );
            if !report.passed {
                return Err(Error::Domain(format!(
                    "gradient check failed: max relative error {:e} exceeds {:e}",
                    report.max_rel_error, report.tolerance
                )));
            }
        }
        Command::TrainToy { objective, alpha, steps, step_size, seed, task, trace_out, probe_samples } => {
            let task = match task {
                Some(p) => ToyTask::load(p)?,
                None => ToyTask::entropy_demo(),
            };
            let mut tc = TrainConfig::new(objective, alpha, steps, step_size);
            tc.seed = seed;
            if let Some(samples) = probe_samples {
                tc.probe = EntropyProbe::Sampled { samples, temperature: 1.0 };
            }
            let model = task.initial_model::<f64>()?;
            let (_, trace) = train(&model, &task, &tc)?;
            let csv = trace_to_csv(&trace);
            match trace_out {
                Some(path) => write_file(&path, csv)?,
                None => print!("{csv}"),
            }
            let (first, last) = (trace[0], trace[trace.len() - 1]);
            eprintln!(
                "entropy {:.6} -> {:.6}, combined loss {:.6} -> {:.6}",
                first.mean_entropy, last.mean_entropy, first.loss_combined, last.loss_combined
            );
        }
        Command::Run {
            paths,
            incorrect_input,
            target,
            suppress_count,
            suppress_max_per_query,
            suppress_direction,
            alpha,
            seed,
        } => {
            set(&mut cfg.input, paths.input);
            set(&mut cfg.output_dir, paths.output_dir);
            if incorrect_input.is_some() {
                cfg.incorrect_input = incorrect_input;
            }
            target.apply(&mut cfg);
            set(&mut cfg.suppress.count, suppress_count);
            set(&mut cfg.suppress.max_per_query, suppress_max_per_query);
            set(&mut cfg.suppress.direction, suppress_direction);
            set(&mut cfg.alpha, alpha);
            set(&mut cfg.seed, seed);
            let m = run_pipeline(&cfg)?;
            let c = &m.counts;
            println!(
                "promote {} / suppress {} (correct {}, incorrect {}); manifest at {}",
                c.promote_selected,
                c.suppress_selected,
                c.verified_correct,
                c.verified_incorrect,
                cfg.output_dir.join(MANIFEST_FILE).display()
            );
            for note in &m.notes {
                eprintln!("note: {note}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caps_and_intervals_parse() {
        assert_eq!(parse_cap("inf"), Ok(UNBOUNDED));
        assert_eq!(parse_cap("3"), Ok(3));
        assert!(parse_cap("0").is_err());
        assert!(parse_cap("-1").is_err());
        assert_eq!(parse_interval("2.0:2.5"), Ok((2.0, 2.5)));
        assert!(parse_interval("2.0").is_err());
    }

    #[test]
    fn default_alpha_matches_core() {
        assert_eq!(PipelineConfig::default().alpha, oxa_core::objective::DEFAULT_ALPHA);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
