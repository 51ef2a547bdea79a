//! Variants x order seeds, with a per-variant summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use crate::config::ExperimentConfig;
use crate::run::{self, read_metrics, RunError};

/// Metrics summarised across seeds.
pub const SUMMARY_METRICS: [&str; 5] = ["aan", "faf", "frf", "la", "aia"];

pub const SUMMARY_FILE: &str = "sweep_summary.csv";

/// Mean and population standard deviation (divide by `n`).
pub fn mean_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One summary line per variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub config_hash: String,
    pub method: String,
    pub arch_stable: String,
    pub arch_plastic: String,
    pub runs: usize,
    /// `(metric, mean, population std)`; metrics missing from a run are
    /// left out of its statistics.
    pub stats: Vec<(String, f64, f64)>,
}

/// Runs every variant and seed not already on disk. With `jobs > 1` and an
/// executable to call, pending runs are spread over that many worker
/// processes (`exe run <config> --seed <s>`); otherwise they run here.
pub fn sweep(variants: &[ExperimentConfig], jobs: usize, exe: Option<&Path>) -> Result<Vec<VariantSummary>, RunError> {
    let mut pending = Vec::new();
    for cfg in variants {
        for &seed in &cfg.order_seeds {
            if cfg.run_dir(seed).join("metrics.csv").exists() {
                eprintln!("skip {} (done)", cfg.run_id(seed));
            } else {
                pending.push((cfg, seed));
            }
        }
    }
    match exe {
        Some(exe) if jobs > 1 && !pending.is_empty() => run_workers(&pending, jobs, exe)?,
        _ => {
            for cfg in variants {
                run::run_config(cfg, true)?;
            }
        }
    }
    let summaries = variants.iter().map(summarize_variant).collect::<Result<Vec<_>, _>>()?;
    if let Some(first) = variants.first() {
        write_summary(&first.output.dir.join(SUMMARY_FILE), &summaries)?;
    }
    Ok(summaries)
}

fn run_workers(pending: &[(&ExperimentConfig, u64)], jobs: usize, exe: &Path) -> Result<(), RunError> {
    let mut queue: Vec<(PathBuf, u64, String)> = Vec::new();
    for (cfg, seed) in pending {
        let dir = cfg.output.dir.join("sweep_configs");
        fs::create_dir_all(&dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
        let path = dir.join(format!("{}.json", cfg.hash()));
        fs::write(&path, cfg.to_json()).map_err(|source| RunError::Io { path: path.clone(), source })?;
        queue.push((path, *seed, cfg.run_id(*seed)));
    }
    queue.reverse();
    let mut running: Vec<(Child, String)> = Vec::new();
    let mut failed = Vec::new();
    while !queue.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some((path, seed, id)) = queue.pop() else { break };
            let child = Command::new(exe)
                .arg("run")
                .arg(&path)
                .arg("--seed")
                .arg(seed.to_string())
                .spawn()
                .map_err(|source| RunError::Io { path: exe.to_path_buf(), source })?;
            running.push((child, id));
        }
        let (mut child, id) = running.remove(0);
        let status = child.wait().map_err(|source| RunError::Io { path: exe.to_path_buf(), source })?;
        if !status.success() {
            failed.push(format!("{} ({})", id, status));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(RunError::Failed(format!("worker runs failed: {}", failed.join(", "))))
    }
}

/// Statistics of one variant, read back from its runs' metrics files.
pub fn summarize_variant(cfg: &ExperimentConfig) -> Result<VariantSummary, RunError> {
    let mut per_run = Vec::new();
    for &seed in &cfg.order_seeds {
        per_run.push(read_metrics(&cfg.run_dir(seed).join("metrics.csv"))?);
    }
    let stats = SUMMARY_METRICS
        .iter()
        .filter_map(|&m| {
            let values: Vec<f64> = per_run.iter().filter_map(|rows| rows.iter().find(|r| r.metric == m).map(|r| r.value)).collect();
            if values.is_empty() {
                return None;
            }
            let (mean, std) = mean_pop_std(&values);
            Some((m.to_string(), mean, std))
        })
        .collect();
    Ok(VariantSummary {
        variant: cfg.variant.clone().unwrap_or_else(|| cfg.hash()),
        config_hash: cfg.hash(),
        method: cfg.method.name().into(),
        arch_stable: cfg.arch_stable.label(),
        arch_plastic: cfg.plastic_label(),
        runs: per_run.len(),
        stats,
    })
}

fn write_summary(path: &Path, rows: &[VariantSummary]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["variant", "config_hash", "method", "arch_stable", "arch_plastic", "runs"].map(String::from).to_vec();
    for m in SUMMARY_METRICS {
        header.push(format!("{}_mean", m));
        header.push(format!("{}_pop_std", m));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.config_hash.clone(), r.method.clone(), r.arch_stable.clone(), r.arch_plastic.clone(), r.runs.to_string()];
        for m in SUMMARY_METRICS {
            match r.stats.iter().find(|(name, _, _)| name == m) {
                Some((_, mean, std)) => {
                    rec.push(mean.to_string());
                    rec.push(std.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| RunError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}
