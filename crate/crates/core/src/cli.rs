//! Experiment configuration, runs, sweeps and their output files.
//!
//! A run directory holds:
//!
//! - `results.csv`: one row per task, columns [`RESULT_COLUMNS`], sorted by
//!   (strategy, seed, task)
//! - `trace.json`: the per-iteration loop trace
//! - `summary.json`: averaged-over-tasks accuracy and per-task metrics
//! - `config.echo.json`: the fully resolved configuration
//! - `timing.csv`: wall time per task, kept apart so the files above are
//!   byte-reproducible
//!
//! A sweep writes one run directory per arm (`arm-<value>/`) plus an
//! aggregated `sweep.csv` whose first column names the arm.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{build_stream, run_experiment, ExperimentConfig, Metrics, Stream, StreamSpec, Strategy};
use crate::embedding::{generate_synthetic, read_embeddings, read_header, write_embeddings, ClassShape, EmbeddingSet, SyntheticSpec};
use crate::heads::{TrainConfig, DEFAULT_HIDDEN};
use crate::inner_loop::{IterationTrace, LoopConfig, LoopPolicy};
use crate::replay::{LossWeights, DEFAULT_CAPACITY};
use crate::{seed, ClassId, Error, Result};

/// Flat run configuration. Every key is optional in the file; absent keys
/// take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// CEMB file with labels.
    pub dataset: Option<PathBuf>,
    /// `K,D,N,SEP`: classes, dimension, samples per class, separation.
    pub synthetic: Option<String>,
    /// Rank of each synthetic class; 0 means isotropic.
    pub synthetic_rank: usize,
    pub synthetic_residual_std: f64,

    pub strategy: String,
    pub seed: u64,
    pub out: PathBuf,

    pub classes_per_task: usize,
    pub num_tasks: usize,
    pub pretrain_classes: Vec<u32>,
    pub mix_old: usize,
    pub mix_new: usize,
    pub holdout_fraction: f64,
    pub eval_fraction: f64,
    pub budget_fraction: f64,

    pub alpha: f64,
    pub k_std: f64,
    pub max_iterations: usize,
    pub eps_den: f64,
    pub eps_amb: f64,
    pub variance_retained: f64,
    pub validation_rate: f64,
    pub validation_min_per_class: usize,
    pub query_novel_only: bool,

    pub short_learning_rate: f64,
    pub short_epochs: usize,
    pub short_batch_size: usize,
    pub long_learning_rate: f64,
    pub long_epochs: usize,
    pub long_batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub hidden: usize,

    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub buffer_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stream = StreamSpec::default();
        let lp = LoopConfig::default();
        let short = TrainConfig::short_term();
        let long = TrainConfig::long_term();
        let w = LossWeights::default();
        Self {
            dataset: None,
            synthetic: None,
            synthetic_rank: 0,
            synthetic_residual_std: 0.0,
            strategy: Strategy::Cual.name().to_string(),
            seed: 0,
            out: PathBuf::from("out"),
            classes_per_task: stream.classes_per_task,
            num_tasks: stream.num_tasks,
            pretrain_classes: stream.pretrain_classes.iter().map(|c| c.0).collect(),
            mix_old: stream.mix_old,
            mix_new: stream.mix_new,
            holdout_fraction: stream.holdout_fraction,
            eval_fraction: stream.eval_fraction,
            budget_fraction: stream.budget_fraction,
            alpha: lp.alpha,
            k_std: lp.k_std,
            max_iterations: lp.max_iterations,
            eps_den: lp.eps_den,
            eps_amb: lp.eps_amb,
            variance_retained: lp.variance_retained,
            validation_rate: lp.validation_rate,
            validation_min_per_class: lp.validation_min_per_class,
            query_novel_only: lp.query_novel_only,
            short_learning_rate: short.learning_rate,
            short_epochs: short.epochs,
            short_batch_size: short.batch_size,
            long_learning_rate: long.learning_rate,
            long_epochs: long.epochs,
            long_batch_size: long.batch_size,
            adam_beta1: long.beta1,
            adam_beta2: long.beta2,
            adam_epsilon: long.epsilon,
            hidden: DEFAULT_HIDDEN,
            beta: w.beta,
            gamma: w.gamma,
            theta: w.theta,
            buffer_capacity: DEFAULT_CAPACITY,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub budget: Option<f64>,
    pub out: Option<PathBuf>,
    pub synthetic: Option<String>,
}

/// Parses `K,D,N,SEP`.
pub fn parse_synthetic(s: &str) -> Result<(usize, usize, usize, f64)> {
    let bad = || Error::config("synthetic", format!("expected K,D,N,SEP, got {s:?}"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
        parts[3].parse().map_err(|_| bad())?,
    ))
}

impl RunConfig {
    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy.parse()
    }

    fn seed_for(&self, tag: &str) -> u64 {
        seed::derive(self.seed, tag)
    }

    pub fn synthetic_spec(&self) -> Result<Option<SyntheticSpec>> {
        let Some(s) = &self.synthetic else { return Ok(None) };
        let (k, d, n, sep) = parse_synthetic(s)?;
        let mut spec = SyntheticSpec::new(k, d, n, sep, self.seed_for("synthetic"));
        if self.synthetic_rank > 0 {
            spec = spec.with_shape(ClassShape::LowRank {
                rank: self.synthetic_rank,
                residual_std: self.synthetic_residual_std,
            });
        }
        Ok(Some(spec))
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            classes_per_task: self.classes_per_task,
            num_tasks: self.num_tasks,
            pretrain_classes: self.pretrain_classes.iter().copied().map(ClassId).collect(),
            mix_old: self.mix_old,
            mix_new: self.mix_new,
            holdout_fraction: self.holdout_fraction,
            eval_fraction: self.eval_fraction,
            budget_fraction: self.budget_fraction,
            seed: self.seed_for("stream"),
        }
    }

    fn train(&self, lr: f64, epochs: usize, batch_size: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size,
            seed: 0,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            loop_cfg: LoopConfig {
                alpha: self.alpha,
                k_std: self.k_std,
                max_iterations: self.max_iterations,
                budget_fraction: self.budget_fraction,
                eps_den: self.eps_den,
                eps_amb: self.eps_amb,
                variance_retained: self.variance_retained,
                validation_rate: self.validation_rate,
                validation_min_per_class: self.validation_min_per_class,
                short: self.train(self.short_learning_rate, self.short_epochs, self.short_batch_size),
                long: self.train(self.long_learning_rate, self.long_epochs, self.long_batch_size),
                loss_weights: LossWeights {
                    beta: self.beta,
                    gamma: self.gamma,
                    theta: self.theta,
                },
                policy: LoopPolicy::CUAL,
                query_novel_only: self.query_novel_only,
                seed: self.seed_for("loop"),
            },
            hidden: self.hidden,
            buffer_capacity: self.buffer_capacity,
        })
    }

    /// Checks every component invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => return Err(Error::config("dataset", "set either dataset or synthetic, not both")),
            (None, None) => return Err(Error::config("dataset", "no dataset source: set dataset or synthetic")),
            _ => {}
        }
        if let Some(spec) = self.synthetic_spec()? {
            spec.validate()?;
        }
        self.strategy()?;
        self.stream_spec().validate()?;
        let exp = self.experiment_config()?;
        exp.loop_cfg.validate()?;
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be at least 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("buffer_capacity", "must be at least 1"));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = &o.strategy {
            self.strategy = s.clone();
        }
        if let Some(b) = o.budget {
            self.budget_fraction = b;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(s) = &o.synthetic {
            self.synthetic = Some(s.clone());
            self.dataset = None;
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Output(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }
}

/// Reads a config file (`.json` or TOML key-value), applies the flag
/// overrides, canonicalizes the strategy name and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| Error::ConfigParse(format!("{}: {e}", p.display())))?
            } else {
                RunConfig::from_toml(&text).map_err(|e| Error::ConfigParse(format!("{}: {e}", p.display())))?
            }
        }
    };
    cfg.apply(overrides);
    cfg.validate()?;
    cfg.strategy = cfg.strategy()?.name().to_string();
    Ok(cfg)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<EmbeddingSet> {
    match (&cfg.dataset, cfg.synthetic_spec()?) {
        (Some(path), _) => read_embeddings(path),
        (None, Some(spec)) => generate_synthetic(&spec),
        (None, None) => Err(Error::config("dataset", "no dataset source")),
    }
}

pub fn load_stream(cfg: &RunConfig) -> Result<Stream> {
    build_stream(&load_dataset(cfg)?, &cfg.stream_spec())
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "strategy",
    "seed",
    "task",
    "cumulative_accuracy",
    "micro_accuracy",
    "labels_used",
    "budget_total",
    "pseudo_labels_used",
    "pseudo_label_precision",
    "discovery_recall",
    "learned_classes",
];

/// One task of one run. `wall_time_ms` is written to `timing.csv` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub seed: u64,
    pub task: usize,
    pub cumulative_accuracy: f64,
    pub micro_accuracy: f64,
    pub labels_used: usize,
    pub budget_total: usize,
    pub pseudo_labels_used: usize,
    pub pseudo_label_precision: Option<f64>,
    pub discovery_recall: f64,
    pub learned_classes: usize,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl ResultRow {
    fn from_metrics(strategy: Strategy, seed: u64, metrics: &Metrics) -> Vec<ResultRow> {
        metrics
            .tasks
            .iter()
            .map(|m| ResultRow {
                strategy: strategy.name().to_string(),
                seed,
                task: m.task,
                cumulative_accuracy: m.cumulative_accuracy,
                micro_accuracy: m.micro_accuracy,
                labels_used: m.labels_used,
                budget_total: m.budget_total,
                pseudo_labels_used: m.pseudo_labels_used,
                pseudo_label_precision: m.pseudo_label_precision,
                discovery_recall: m.discovery_recall,
                learned_classes: m.learned_classes,
                wall_time_ms: m.wall_time_ms,
            })
            .collect()
    }
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| (&a.strategy, a.seed, a.task).cmp(&(&b.strategy, b.seed, b.task)));
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Output(format!("{}: {e}", path.display()))
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn write_timing(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["strategy", "seed", "task", "wall_time_ms"]).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([r.strategy.clone(), r.seed.to_string(), r.task.to_string(), format!("{:.3}", r.wall_time_ms)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Output(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub pool_size: usize,
    /// FNV-1a over the pool's sample ids in pool order.
    pub pool_digest: String,
    pub cumulative_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub seed: u64,
    pub pretrain_accuracy: f64,
    pub averaged_accuracy: f64,
    pub final_accuracy: f64,
    pub discovery_recall: f64,
    pub oracle_calls: usize,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Serialize)]
struct TraceFile<'a> {
    strategy: &'a str,
    seed: u64,
    iterations: &'a [IterationTrace],
}

pub fn pool_digest(pool: &EmbeddingSet) -> String {
    let bytes: Vec<u8> = pool.ids().iter().flat_map(|id| id.0.to_le_bytes()).collect();
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub out: PathBuf,
    pub rows: Vec<ResultRow>,
    pub summary: Summary,
}

/// Runs one experiment on a prebuilt stream and writes the run directory.
pub fn run_on_stream(cfg: &RunConfig, stream: &Stream) -> Result<RunReport> {
    let strategy = cfg.strategy()?;
    let result = run_experiment(stream, strategy, &cfg.experiment_config()?, cfg.budget_fraction)?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut rows = ResultRow::from_metrics(strategy, cfg.seed, &result.metrics);
    sort_rows(&mut rows);
    let summary = Summary {
        strategy: strategy.name().to_string(),
        seed: cfg.seed,
        pretrain_accuracy: result.metrics.pretrain_accuracy,
        averaged_accuracy: result.metrics.averaged_accuracy,
        final_accuracy: result.metrics.final_accuracy(),
        discovery_recall: result.metrics.overall_recall(stream),
        oracle_calls: result.metrics.oracle_calls,
        tasks: result
            .metrics
            .tasks
            .iter()
            .zip(&stream.tasks)
            .map(|(m, t)| TaskSummary {
                task: m.task,
                pool_size: t.pool.len(),
                pool_digest: pool_digest(&t.pool),
                cumulative_accuracy: m.cumulative_accuracy,
            })
            .collect(),
    };
    write_results(&out.join("results.csv"), &rows)?;
    write_timing(&out.join("timing.csv"), &rows)?;
    write_json(
        &out.join("trace.json"),
        &TraceFile {
            strategy: strategy.name(),
            seed: cfg.seed,
            iterations: &result.trace,
        },
    )?;
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("config.echo.json"), cfg)?;
    Ok(RunReport {
        out: out.clone(),
        rows,
        summary,
    })
}

/// Validates, builds the stream and runs one experiment.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let stream = load_stream(cfg)?;
    run_on_stream(cfg, &stream)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Strategy(Vec<String>),
    Budget(Vec<f64>),
}

impl SweepAxis {
    fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::Strategy(v) => v.clone(),
            SweepAxis::Budget(v) => v.iter().map(|b| b.to_string()).collect(),
        }
    }
}

#[derive(Debug)]
pub struct SweepReport {
    pub arms: Vec<(String, RunReport)>,
    pub failures: Vec<(String, Error)>,
}

/// One run per axis value on a shared stream, each in `out/arm-<value>/`,
/// aggregated into `out/sweep.csv`. A failing arm is reported without
/// stopping the others.
pub fn cmd_sweep(cfg: &RunConfig, axis: &SweepAxis) -> Result<SweepReport> {
    let labels = axis.labels();
    if labels.is_empty() {
        return Ok(SweepReport {
            arms: Vec::new(),
            failures: Vec::new(),
        });
    }
    cfg.validate()?;
    let stream = load_stream(cfg)?;
    let outcomes: Vec<(String, Result<RunReport>)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut arm = cfg.clone();
            match axis {
                SweepAxis::Strategy(v) => arm.strategy = v[i].clone(),
                SweepAxis::Budget(v) => arm.budget_fraction = v[i],
            }
            arm.out = cfg.out.join(format!("arm-{label}"));
            let report = arm.validate().and_then(|_| {
                arm.strategy = arm.strategy()?.name().to_string();
                run_on_stream(&arm, &stream)
            });
            (label.clone(), report)
        })
        .collect();

    let mut arms = Vec::new();
    let mut failures = Vec::new();
    for (label, outcome) in outcomes {
        match outcome {
            Ok(r) => arms.push((label, r)),
            Err(e) => failures.push((label, e)),
        }
    }
    let path = cfg.out.join("sweep.csv");
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut header = vec!["arm"];
    header.extend(RESULT_COLUMNS);
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    let mut all: Vec<(String, ResultRow)> = arms
        .iter()
        .flat_map(|(label, r)| r.rows.iter().map(move |row| (label.clone(), row.clone())))
        .collect();
    all.sort_by(|(la, a), (lb, b)| (&a.strategy, a.seed, a.task, la).cmp(&(&b.strategy, b.seed, b.task, lb)));
    for (label, row) in all {
        let precision = row.pseudo_label_precision.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([
            label,
            row.strategy,
            row.seed.to_string(),
            row.task.to_string(),
            row.cumulative_accuracy.to_string(),
            row.micro_accuracy.to_string(),
            row.labels_used.to_string(),
            row.budget_total.to_string(),
            row.pseudo_labels_used.to_string(),
            precision,
            row.discovery_recall.to_string(),
            row.learned_classes.to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(SweepReport { arms, failures })
}

pub fn cmd_gen_synthetic(spec: &SyntheticSpec, path: &Path) -> Result<EmbeddingSet> {
    let set = generate_synthetic(spec)?;
    write_embeddings(&set, path)?;
    Ok(set)
}

/// One-line header description of a CEMB file.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = read_header(&bytes)?;
    Ok(format!(
        "{}: CEMB v{} n={} d={} labels={}",
        path.display(),
        h.version,
        h.n,
        h.d,
        if h.has_labels { "yes" } else { "no" }
    ))
}
