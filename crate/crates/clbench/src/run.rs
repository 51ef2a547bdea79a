//! Executes one experiment config for one order seed and writes its
//! artifacts.
//!
//! Layout of a run directory `{config_hash}-{seed}`:
//! - `config.json`: the resolved config, restricted to this seed
//! - `events.jsonl`: one `{task, phase, epoch, loss, lr}` object per epoch
//! - `accuracy.csv`: the accuracy matrix as exact counts
//! - `metrics.csv`: derived metrics, long format
//! - `confusion.json`: task confusion after the last task
//! - `checkpoints/task_{k}/{stable,plastic}.{bin,json}`
//!
//! Files are written into `{dir}.partial` and renamed at the end, so an
//! existing run directory is always complete.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use clbench_core::data::{split_tasks, synth_blobs_with_std, Dataset, TaskStream};
use clbench_core::engine::{peak_param_report, run_stream, DualArchState, EpochEvent, EventSink, HeadAccounting, RunResult, StepEval};
use clbench_core::metrics::{af, rf, summarize, AccuracyMatrix, Summary};

use crate::checkpoint;
use crate::config::{Checkpoints, ConfigError, DatasetConfig, ExperimentConfig, DATA_ENV};
use crate::idx::{self, IdxError};

pub const METRICS_HEADER: [&str; 8] = ["run_id", "seed", "method", "arch_stable", "arch_plastic", "metric", "task_step", "value"];

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Idx(#[from] IdxError),
    #[error("dataset: {0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error("{0}")]
    Diverged(clbench_core::Error),
    #[error("{0}")]
    Engine(clbench_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

impl From<clbench_core::Error> for RunError {
    fn from(e: clbench_core::Error) -> Self {
        match e {
            clbench_core::Error::Diverged { .. } => RunError::Diverged(e),
            e => RunError::Engine(e),
        }
    }
}

impl RunError {
    /// Process exit status: 2 for config problems, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Usage(_) => 2,
            RunError::Diverged(_) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Train and test splits, before the task split.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the config's dataset and reshapes samples to the learners' input
/// shape.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Data, RunError> {
    let (train, test) = match cfg.dataset {
        DatasetConfig::MnistIdx { max_train_per_class, max_test_per_class, subsample_seed, .. } => {
            let dir = cfg
                .dataset
                .data_dir()
                .ok_or_else(|| RunError::Data(format!("no MNIST directory: set dataset.path, --data or {}", DATA_ENV)))?;
            let (mut train, mut test) = idx::load_mnist_dir(&dir)?;
            if train.num_classes() != 10 || test.num_classes() != 10 {
                return Err(RunError::Data(format!("{}: expected 10 classes", dir.display())));
            }
            if let Some(m) = max_train_per_class {
                train = train.subsample_per_class(m, subsample_seed);
            }
            if let Some(m) = max_test_per_class {
                test = test.subsample_per_class(m, subsample_seed);
            }
            (train, test)
        }
        DatasetConfig::SynthBlobs { num_classes, per_class, test_per_class, dim, std, seed } => {
            // One draw, split by sample round, so both halves share centres.
            let all = synth_blobs_with_std(num_classes, per_class + test_per_class, dim, std, seed)?;
            let cut = per_class * num_classes;
            let train: Vec<usize> = (0..cut).collect();
            let test: Vec<usize> = (cut..all.len()).collect();
            (all.subset(&train), all.subset(&test))
        }
    };
    let shape = &cfg.arch_stable.input_shape;
    Ok(Data { train: train.reshape(shape)?, test: test.reshape(shape)? })
}

/// Resolves `$CLBENCH_DATA` into the config so the archived copy names the
/// directory that was actually read.
pub fn pin_data_dir(cfg: &mut ExperimentConfig, cli: Option<&Path>) {
    if let DatasetConfig::MnistIdx { path, .. } = &mut cfg.dataset {
        if let Some(p) = cli {
            *path = Some(p.to_path_buf());
        } else if path.is_none() {
            *path = std::env::var_os(DATA_ENV).map(PathBuf::from);
        }
    }
}

#[derive(Serialize)]
struct ConfusionFile<'a> {
    classes_per_task: usize,
    counts: &'a [Vec<u64>],
    normalized: Vec<Vec<f64>>,
}

struct ArtifactSink {
    events: BufWriter<File>,
    dir: PathBuf,
    checkpoints: Checkpoints,
    last_task: usize,
    error: Option<RunError>,
}

impl ArtifactSink {
    fn fail(&mut self, e: RunError) -> clbench_core::Error {
        let msg = e.to_string();
        self.error = Some(e);
        clbench_core::Error::InvalidArgument(format!("writing artifacts: {}", msg))
    }
}

impl EventSink for ArtifactSink {
    fn epoch(&mut self, event: &EpochEvent) -> clbench_core::Result<()> {
        let line = serde_json::to_string(event).expect("event serializes");
        if let Err(e) = writeln!(self.events, "{}", line) {
            let path = self.dir.join("events.jsonl");
            return Err(self.fail(RunError::Io { path, source: e }));
        }
        Ok(())
    }

    fn task_end(&mut self, task: usize, state: &DualArchState, eval: &StepEval) -> clbench_core::Result<()> {
        let keep = match self.checkpoints {
            Checkpoints::EveryTask => true,
            Checkpoints::Final => task == self.last_task,
            Checkpoints::None => false,
        };
        if keep {
            let dir = self.dir.join("checkpoints").join(format!("task_{}", task + 1));
            let mut res = checkpoint::save(&state.stable, &dir, "stable").map(|_| ());
            if let (Ok(()), Some(p)) = (&res, &state.plastic) {
                res = checkpoint::save(p, &dir, "plastic").map(|_| ());
            }
            if let Err(e) = res {
                return Err(self.fail(e.into()));
            }
        }
        eprintln!("  task {}/{}: joint accuracy {:.2}%", task + 1, self.last_task + 1, eval.joint.percent());
        Ok(())
    }
}

/// Result of one `(config, seed)` run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    pub summary: Summary,
    pub peak_params: usize,
    /// The directory already existed and nothing was run.
    pub skipped: bool,
}

pub fn split(cfg: &ExperimentConfig, data: &Data, seed: u64) -> Result<TaskStream, RunError> {
    Ok(split_tasks(data.train.clone(), data.test.clone(), cfg.tasks, seed)?)
}

/// Runs `cfg` for order seed `seed` and writes its directory, replacing
/// any previous one.
pub fn run_seed(cfg: &ExperimentConfig, data: &Data, seed: u64) -> Result<RunOutcome, RunError> {
    let run_id = cfg.run_id(seed);
    let dir = cfg.run_dir(seed);
    let partial = dir.with_file_name(format!("{}.partial", run_id));
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(io_err(&partial))?;
    }
    fs::create_dir_all(&partial).map_err(io_err(&partial))?;
    let seeded = cfg.for_seed(seed);
    let path = partial.join("config.json");
    fs::write(&path, seeded.to_json()).map_err(io_err(&path))?;

    let stream = split(cfg, data, seed)?;
    let events_path = partial.join("events.jsonl");
    let events = BufWriter::new(File::create(&events_path).map_err(io_err(&events_path))?);
    let mut sink = ArtifactSink { events, dir: partial.clone(), checkpoints: cfg.output.checkpoints, last_task: cfg.tasks - 1, error: None };
    let method = cfg.method.build()?;
    let result = run_stream(&stream, &cfg.arch_stable, cfg.arch_plastic.as_ref(), method, cfg.engine(), &mut sink);
    if let Some(e) = sink.error.take() {
        return Err(e);
    }
    let result = result?;
    sink.events.flush().map_err(io_err(&events_path))?;
    drop(sink);

    write_accuracy(&partial.join("accuracy.csv"), &result.matrix)?;
    let confusion = ConfusionFile { classes_per_task: stream.classes_per_task, counts: &result.confusion.counts, normalized: result.confusion.normalized() };
    let path = partial.join("confusion.json");
    fs::write(&path, serde_json::to_string_pretty(&confusion).expect("serializes") + "\n").map_err(io_err(&path))?;
    let summary = summarize(&result.matrix)?;
    let peak_params = peak_param_report(&result, HeadAccounting::FullHead);
    write_metrics(&partial.join("metrics.csv"), &seeded, seed, &result, &summary, peak_params)?;

    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::rename(&partial, &dir).map_err(io_err(&dir))?;
    Ok(RunOutcome { run_id, dir, summary, peak_params, skipped: false })
}

fn write_accuracy(path: &Path, m: &AccuracyMatrix) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task_step", "eval_task", "correct", "total", "accuracy"])?;
    for (k, row) in m.per_task.iter().enumerate() {
        for (b, c) in row.iter().enumerate() {
            w.write_record([(k + 1).to_string(), (b + 1).to_string(), c.correct.to_string(), c.total.to_string(), c.percent().to_string()])?;
        }
        let j = m.joint[k];
        w.write_record([(k + 1).to_string(), "joint".into(), j.correct.to_string(), j.total.to_string(), j.percent().to_string()])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// One metrics row.
pub struct MetricRow {
    pub metric: String,
    pub task_step: usize,
    pub value: f64,
}

/// Every metric of a finished run, in file order.
pub fn metric_rows(result: &RunResult, summary: &Summary, peak_params: usize) -> Vec<MetricRow> {
    let a = result.matrix.rows();
    let k_final = a.len();
    let mut rows = Vec::new();
    let mut push = |metric: &str, task_step: usize, value: f64| rows.push(MetricRow { metric: metric.into(), task_step, value });
    for k in 1..=k_final {
        push("joint_accuracy", k, result.matrix.joint[k - 1].percent());
        push("new_task_accuracy", k, a[k - 1][k - 1]);
        if k >= 2 {
            if let Ok(v) = af(&a, k) {
                push("af", k, v);
            }
            if let Ok(v) = rf(&a, k) {
                push("rf", k, v);
            }
        }
        for (name, v) in result.diagnostics.get(k - 1).into_iter().flatten() {
            push(name, k, *v);
        }
    }
    push("aan", k_final, summary.aan);
    if let Some(v) = summary.faf {
        push("faf", k_final, v);
    }
    if let Some(v) = summary.frf {
        push("frf", k_final, v);
    }
    push("la", k_final, summary.la);
    push("aia", k_final, summary.aia);
    push("peak_params", k_final, peak_params as f64);
    rows
}

fn write_metrics(path: &Path, cfg: &ExperimentConfig, seed: u64, result: &RunResult, summary: &Summary, peak: usize) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    let run_id = cfg.run_id(seed);
    let stable = cfg.arch_stable.label();
    let plastic = cfg.plastic_label();
    for r in metric_rows(result, summary, peak) {
        w.write_record([
            run_id.as_str(),
            &seed.to_string(),
            cfg.method.name(),
            &stable,
            &plastic,
            &r.metric,
            &r.task_step.to_string(),
            &r.value.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Runs every order seed of `cfg`. With `resume`, seeds whose directory
/// already exists are skipped.
pub fn run_config(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<RunOutcome>, RunError> {
    let mut data = None;
    let mut out = Vec::new();
    for &seed in &cfg.order_seeds {
        let dir = cfg.run_dir(seed);
        if resume && dir.join("metrics.csv").exists() {
            out.push(load_outcome(cfg, seed)?);
            continue;
        }
        if data.is_none() {
            data = Some(load_data(cfg)?);
        }
        eprintln!("run {} ({} / {}, seed {})", cfg.run_id(seed), cfg.method.name(), cfg.plastic_label(), seed);
        out.push(run_seed(cfg, data.as_ref().expect("loaded"), seed)?);
    }
    Ok(out)
}

/// Reads the headline metrics of a finished run back from its CSV.
pub fn load_outcome(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome, RunError> {
    let dir = cfg.run_dir(seed);
    let rows = read_metrics(&dir.join("metrics.csv"))?;
    let get = |m: &str| rows.iter().find(|r| r.metric == m).map(|r| r.value);
    let per_step = |m: &str| rows.iter().filter(|r| r.metric == m).map(|r| r.value).collect::<Vec<_>>();
    let summary = Summary {
        aan: get("aan").unwrap_or(f64::NAN),
        af: per_step("af"),
        rf: per_step("rf").into_iter().map(Some).collect(),
        faf: get("faf"),
        frf: get("frf"),
        la: get("la").unwrap_or(f64::NAN),
        aia: get("aia").unwrap_or(f64::NAN),
    };
    let peak_params = get("peak_params").unwrap_or(0.0) as usize;
    Ok(RunOutcome { run_id: cfg.run_id(seed), dir, summary, peak_params, skipped: true })
}

/// A parsed `metrics.csv` row.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub arch_stable: String,
    pub arch_plastic: String,
    pub metric: String,
    pub task_step: usize,
    pub value: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, RunError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<MetricsRecord>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}
