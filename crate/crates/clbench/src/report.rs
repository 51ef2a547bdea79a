//! Comparison tables and plot data from a directory of finished runs.
//!
//! Outputs, written into the report directory:
//! - `report_table.csv`: every run's metrics rows, ordered by run id
//! - `report_deltas.csv`: two-learner minus single-learner values for runs
//!   whose configs differ only in the plastic learner (and loss weights)
//! - `plot_series.csv`: per-step series for each run
//! - `plot_mean_series.csv`: the same series averaged over order seeds

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::run::{read_metrics, MetricsRecord, RunError, METRICS_HEADER};
use crate::sweep::{mean_pop_std, SUMMARY_METRICS};

/// Per-step metrics exported as plot series.
pub const SERIES: [&str; 4] = ["joint_accuracy", "new_task_accuracy", "af", "rf"];

/// A finished run found on disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub rows: Vec<MetricsRecord>,
}

impl RunRecord {
    fn seed(&self) -> u64 {
        self.config.order_seeds[0]
    }

    fn metric(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == name).map(|r| r.value)
    }

    /// Identity of the single-learner counterpart of this run.
    fn baseline_key(&self) -> String {
        let mut c = self.config.clone();
        c.arch_plastic = None;
        c.loss = Default::default();
        c.variant = None;
        c.run_id(self.seed())
    }
}

/// Finished runs directly under `dir` (directories with `metrics.csv`
/// and `config.json`), sorted by name.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunRecord>, RunError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RunError::Io { path, source }
    };
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.csv").is_file() && p.join("config.json").is_file())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let path = d.join("config.json");
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| RunError::Data(format!("{}: {}", path.display(), e)))?;
        if config.order_seeds.len() != 1 {
            return Err(RunError::Data(format!("{}: expected exactly one order seed", path.display())));
        }
        let rows = read_metrics(&d.join("metrics.csv"))?;
        out.push(RunRecord { dir: d, config, rows });
    }
    Ok(out)
}

/// One line of `report_deltas.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub method: String,
    pub arch_stable: String,
    pub arch_plastic: String,
    pub seed: u64,
    pub metric: String,
    pub dual: f64,
    pub baseline: f64,
    pub delta: f64,
}

/// Pairs every two-learner run with its single-learner counterpart.
pub fn deltas(runs: &[RunRecord]) -> Vec<Delta> {
    let mut baselines: BTreeMap<String, &RunRecord> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.config.arch_plastic.is_none()) {
        baselines.insert(r.baseline_key(), r);
    }
    let mut out = Vec::new();
    for r in runs.iter().filter(|r| r.config.arch_plastic.is_some()) {
        let Some(base) = baselines.get(&r.baseline_key()) else { continue };
        for m in SUMMARY_METRICS {
            if let (Some(dual), Some(baseline)) = (r.metric(m), base.metric(m)) {
                out.push(Delta {
                    method: r.config.method.name().into(),
                    arch_stable: r.config.arch_stable.label(),
                    arch_plastic: r.config.plastic_label(),
                    seed: r.seed(),
                    metric: m.into(),
                    dual,
                    baseline,
                    delta: dual - baseline,
                });
            }
        }
    }
    out
}

/// Writes all report files into `out` and returns the deltas.
pub fn report(results: &Path, out: &Path) -> Result<Vec<Delta>, RunError> {
    let runs = collect_runs(results)?;
    if runs.is_empty() {
        return Err(RunError::Data(format!("{}: no finished runs", results.display())));
    }
    fs::create_dir_all(out).map_err(|source| RunError::Io { path: out.to_path_buf(), source })?;

    let mut w = csv::Writer::from_path(out.join("report_table.csv"))?;
    w.write_record(METRICS_HEADER)?;
    for r in &runs {
        for row in &r.rows {
            w.write_record(record(row))?;
        }
    }
    w.flush().map_err(|source| RunError::Io { path: out.to_path_buf(), source })?;

    let d = deltas(&runs);
    let mut w = csv::Writer::from_path(out.join("report_deltas.csv"))?;
    w.write_record(["method", "arch_stable", "arch_plastic", "seed", "metric", "dual", "baseline", "delta"])?;
    for x in &d {
        w.write_record([
            x.method.clone(),
            x.arch_stable.clone(),
            x.arch_plastic.clone(),
            x.seed.to_string(),
            x.metric.clone(),
            x.dual.to_string(),
            x.baseline.to_string(),
            x.delta.to_string(),
        ])?;
    }
    w.flush().map_err(|source| RunError::Io { path: out.to_path_buf(), source })?;

    let mut w = csv::Writer::from_path(out.join("plot_series.csv"))?;
    w.write_record(["run_id", "seed", "method", "arch_stable", "arch_plastic", "series", "task_step", "value"])?;
    let mut grouped: BTreeMap<(String, &str, usize), (Vec<f64>, &RunRecord)> = BTreeMap::new();
    for r in &runs {
        for row in r.rows.iter().filter(|row| SERIES.contains(&row.metric.as_str())) {
            w.write_record(record(row))?;
            let series = SERIES.iter().find(|s| **s == row.metric).expect("filtered");
            grouped.entry((r.config.hash(), series, row.task_step)).or_insert_with(|| (Vec::new(), r)).0.push(row.value);
        }
    }
    w.flush().map_err(|source| RunError::Io { path: out.to_path_buf(), source })?;

    let mut w = csv::Writer::from_path(out.join("plot_mean_series.csv"))?;
    w.write_record(["config_hash", "method", "arch_stable", "arch_plastic", "series", "task_step", "runs", "mean", "pop_std"])?;
    for ((hash, series, step), (values, r)) in &grouped {
        let (mean, std) = mean_pop_std(values);
        w.write_record([
            hash.clone(),
            r.config.method.name().into(),
            r.config.arch_stable.label(),
            r.config.plastic_label(),
            series.to_string(),
            step.to_string(),
            values.len().to_string(),
            mean.to_string(),
            std.to_string(),
        ])?;
    }
    w.flush().map_err(|source| RunError::Io { path: out.to_path_buf(), source })?;
    Ok(d)
}

fn record(row: &MetricsRecord) -> [String; 8] {
    [
        row.run_id.clone(),
        row.seed.to_string(),
        row.method.clone(),
        row.arch_stable.clone(),
        row.arch_plastic.clone(),
        row.metric.clone(),
        row.task_step.to_string(),
        row.value.to_string(),
    ]
}
