use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use clbench::config::ExperimentConfig;
use clbench::idx::{encode_images, encode_labels, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use clbench::run::read_metrics;

fn clbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clbench")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn blobs_config(out: &Path, method: &str, plastic: &str, seeds: &str, extra: &str) -> String {
    format!(
        r#"{{
  "schema_version": 1,
  "dataset": {{"kind": "synth_blobs", "num_classes": 4, "per_class": 30, "test_per_class": 15, "dim": 8, "seed": 3}},
  "tasks": 2,
  "order_seeds": [{seeds}],
  "method": {method},
  "arch_stable": "mlp:2,16",
  "arch_plastic": {plastic},
  "train": {{"epochs_first": 3, "epochs_rest": 3, "batch_size": 8, "lr0": 0.05}},
  "memory_budget": 8,
  "output": {{"dir": "{}"}}{extra}
}}"#,
        out.display()
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1, "{:?}", dirs);
    dirs[0].clone()
}

#[test]
fn arch_info_examples() {
    let v = json(&clbench(&["arch-info", "--family", "resnet", "--depth", "18", "--width", "64", "--classes", "100", "--small-stem"]));
    let p = v["param_count"].as_u64().unwrap() as f64;
    assert!((p / 11.23e6 - 1.0).abs() < 0.01, "{p}");
    assert!(v["layers"].as_array().unwrap().len() > 5);

    let sta = json(&clbench(&["arch-info", "--preset", "sta_net"]))["param_count"].as_u64().unwrap() as f64;
    let pla = json(&clbench(&["arch-info", "--preset", "pla_net"]))["param_count"].as_u64().unwrap() as f64;
    assert_eq!((sta, pla), (5_103_012.0, 4_846_270.0));

    let v = json(&clbench(&["arch-info", "--family", "mlp", "--depth", "4", "--width", "800", "--in", "784", "--classes", "10"]));
    let p = v["param_count"].as_u64().unwrap() as f64;
    assert!((p / 1.92e6 - 1.0).abs() < 0.01, "{p}");
    assert_eq!(v["flops"].as_u64().unwrap(), 2 * v["macs"].as_u64().unwrap());
}

#[test]
fn arch_info_rejects_bad_depth() {
    let o = clbench(&["arch-info", "--family", "resnet", "--depth", "12", "--width", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("8*b+2"));
}

#[test]
fn run_writes_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write(tmp.path(), "c.json", &blobs_config(&out, r#"{"name": "finetune"}"#, "null", "1", ""));
    let t0 = Instant::now();
    let o = clbench(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t0.elapsed().as_secs() < 60);
    let dir = only_run_dir(&out);
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-1"));
    for f in ["config.json", "events.jsonl", "accuracy.csv", "metrics.csv", "confusion.json", "checkpoints/task_1/stable.json", "checkpoints/task_2/stable.bin"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    assert!(!dir.join("checkpoints/task_1/plastic.json").exists());
    let first = fs::read(dir.join("metrics.csv")).unwrap();
    let header = String::from_utf8(first.clone()).unwrap();
    assert!(header.starts_with("run_id,seed,method,arch_stable,arch_plastic,metric,task_step,value\n"));

    // Same config and seed: the directory is replaced with identical metrics.
    let o = clbench(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(dir.join("metrics.csv")).unwrap(), first);

    // The archived config reproduces the run on its own.
    let archived = dir.join("config.json");
    let again = tmp.path().join("again");
    let o = clbench(&["run", archived.to_str().unwrap(), "--output", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir2 = only_run_dir(&again);
    assert_eq!(dir2.file_name(), dir.file_name());
    assert_eq!(fs::read(dir2.join("metrics.csv")).unwrap(), first);
    assert_eq!(fs::read(dir2.join("events.jsonl")).unwrap(), fs::read(dir.join("events.jsonl")).unwrap());
}

#[test]
fn confusion_rows_sum_to_test_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write(tmp.path(), "c.json", &blobs_config(&out, r#"{"name": "er"}"#, "null", "2", r#", "variants": []"#));
    assert!(clbench(&["run", cfg.to_str().unwrap()]).status.success());
    let dir = only_run_dir(&out);
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("confusion.json")).unwrap()).unwrap();
    for row in c["counts"].as_array().unwrap() {
        let s: u64 = row.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(s, 30);
    }
    for row in c["normalized"].as_array().unwrap() {
        let s: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let acc = fs::read_to_string(dir.join("accuracy.csv")).unwrap();
    assert!(acc.starts_with("task_step,eval_task,correct,total,accuracy\n"));
    assert_eq!(acc.lines().count(), 1 + 2 + 3);
}

#[test]
fn dual_run_events_are_phase_ordered() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write(tmp.path(), "c.json", &blobs_config(&out, r#"{"name": "lwf"}"#, r#""mlp:3,12""#, "1", ""));
    let o = clbench(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(&out);
    let events: Vec<serde_json::Value> =
        fs::read_to_string(dir.join("events.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 2 * (3 + 3));
    for task in 0..2 {
        let phases: Vec<&str> = events.iter().filter(|e| e["task"] == task).map(|e| e["phase"].as_str().unwrap()).collect();
        assert_eq!(phases, ["plastic", "plastic", "plastic", "stable", "stable", "stable"]);
    }
    for e in &events {
        for k in ["task", "phase", "epoch", "loss", "lr"] {
            assert!(e.get(k).is_some());
        }
    }
    assert!(dir.join("checkpoints/task_2/plastic.json").exists());
    let rows = read_metrics(&dir.join("metrics.csv")).unwrap();
    assert!(rows.iter().all(|r| r.arch_plastic == "mlp3w12" && r.method == "lwf"));
}

#[test]
fn invalid_config_exits_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let text = blobs_config(&tmp.path().join("runs"), r#"{"name": "finetune"}"#, "null", "1", "").replace(r#""tasks": 2"#, r#""tasks": 3"#);
    let cfg = write(tmp.path(), "bad.json", &text);
    let o = clbench(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.json:4:"), "{err}");
    assert!(!tmp.path().join("runs").exists());

    let cfg = write(tmp.path(), "typo.json", &text.replace(r#""tasks": 3"#, "\"tasks\": 2,\n  \"epoch\": 1"));
    let o = clbench(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("typo.json:5:"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let text = blobs_config(&tmp.path().join("runs"), r#"{"name": "finetune"}"#, "null", "1", "").replace(r#""lr0": 0.05"#, r#""lr0": 1e200"#);
    let cfg = write(tmp.path(), "c.json", &text);
    let o = clbench(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn single_learner_config_matches_library_path() {
    use clbench_core::engine::run_stream;
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg_path = write(tmp.path(), "c.json", &blobs_config(&out, r#"{"name": "lwf"}"#, r#""none""#, "4", ""));
    assert!(clbench(&["run", cfg_path.to_str().unwrap()]).status.success());
    let cfg = ExperimentConfig::load(&cfg_path).unwrap().remove(0);
    assert!(cfg.arch_plastic.is_none());
    let data = clbench::run::load_data(&cfg).unwrap();
    let stream = clbench::run::split(&cfg, &data, 4).unwrap();
    let r = run_stream(&stream, &cfg.arch_stable, None, cfg.method.build().unwrap(), cfg.engine(), &mut ()).unwrap();
    let rows = read_metrics(&only_run_dir(&out).join("metrics.csv")).unwrap();
    let joint: Vec<f64> = rows.iter().filter(|r| r.metric == "joint_accuracy").map(|r| r.value).collect();
    assert_eq!(joint, r.matrix.joint_percent());
}

#[test]
fn sweep_summarises_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let variants = r#",
  "variants": [
    {"label": "shallow", "arch_stable": "mlp:2,8"},
    {"label": "default"},
    {"label": "deep", "arch_stable": "mlp:3,12"}
  ]"#;
    let cfg = write(tmp.path(), "s.json", &blobs_config(&out, r#"{"name": "lwf"}"#, "null", "1, 2", variants));
    let o = clbench(&["sweep", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<PathBuf> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).filter(|p| p.join("metrics.csv").exists()).collect();
    assert_eq!(runs.len(), 6);

    let mut r = csv::Reader::from_path(out.join("sweep_summary.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "aan_pop_std"));
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let configs = ExperimentConfig::load(&cfg).unwrap();
    for (row, c) in rows.iter().zip(&configs) {
        assert_eq!(&row[col("variant")], c.variant.as_deref().unwrap());
        assert_eq!(&row[col("runs")], "2");
        for m in ["aan", "faf", "frf"] {
            let vals: Vec<f64> = c
                .order_seeds
                .iter()
                .map(|&s| read_metrics(&c.run_dir(s).join("metrics.csv")).unwrap().into_iter().find(|x| x.metric == m).unwrap().value)
                .collect();
            let mean = (vals[0] + vals[1]) / 2.0;
            let std = ((vals[0] - mean).powi(2) + (vals[1] - mean).powi(2)).div_euclid(2.0).sqrt();
            let got: f64 = row[col(&format!("{m}_mean"))].parse().unwrap();
            let got_std: f64 = row[col(&format!("{m}_pop_std"))].parse().unwrap();
            assert!((got - mean).abs() < 1e-12, "{m}: {got} vs {mean}");
            assert!((got_std - std).abs() < 1e-9 || (got_std - ((vals[0] - vals[1]).abs() / 2.0)).abs() < 1e-12);
        }
    }

    // Remove one run, as if interrupted; only that one is redone.
    let victim = configs[1].run_dir(2);
    let kept = configs[0].run_dir(1).join("metrics.csv");
    let stamp = fs::metadata(&kept).unwrap().modified().unwrap();
    fs::remove_dir_all(&victim).unwrap();
    let o = clbench(&["sweep", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stderr(&o).matches("skip ").count(), 5);
    assert!(victim.join("metrics.csv").exists());
    assert_eq!(fs::metadata(&kept).unwrap().modified().unwrap(), stamp);
}

#[test]
fn sweep_with_worker_processes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let variants = r#",
  "variants": [{"label": "a"}, {"label": "b", "arch_stable": "mlp:2,8"}]"#;
    let cfg = write(tmp.path(), "s.json", &blobs_config(&out, r#"{"name": "finetune"}"#, "null", "1", variants));
    let o = clbench(&["sweep", cfg.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let serial = tmp.path().join("serial");
    let o = clbench(&["sweep", cfg.to_str().unwrap(), "--output", serial.to_str().unwrap()]);
    assert!(o.status.success());
    for c in ExperimentConfig::load(&cfg).unwrap() {
        let a = fs::read(c.run_dir(1).join("metrics.csv")).unwrap();
        let b = fs::read(serial.join(c.run_id(1)).join("metrics.csv")).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn run_refuses_variant_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.json", &blobs_config(&tmp.path().join("o"), r#"{"name": "lwf"}"#, "null", "1", r#", "variants": [{"label": "a"}, {"label": "b"}]"#));
    let o = clbench(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sweep"));
}

#[test]
fn report_single_run_table_equals_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write(tmp.path(), "c.json", &blobs_config(&out, r#"{"name": "finetune"}"#, "null", "1", ""));
    assert!(clbench(&["run", cfg.to_str().unwrap()]).status.success());
    let rep = tmp.path().join("rep");
    let o = clbench(&["report", out.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read(only_run_dir(&out).join("metrics.csv")).unwrap();
    assert_eq!(fs::read(rep.join("report_table.csv")).unwrap(), metrics);
    assert_eq!(fs::read_to_string(rep.join("report_deltas.csv")).unwrap().lines().count(), 1);
    let series = fs::read_to_string(rep.join("plot_series.csv")).unwrap();
    assert_eq!(series.lines().filter(|l| l.contains(",joint_accuracy,")).count(), 2);
    assert!(rep.join("plot_mean_series.csv").exists());
}

#[test]
fn report_deltas_match_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let variants = r#",
  "variants": [{"label": "dual"}, {"label": "single", "arch_plastic": "none"}]"#;
    let cfg = write(tmp.path(), "c.json", &blobs_config(&out, r#"{"name": "lwf"}"#, r#""mlp:3,12""#, "1", variants));
    assert!(clbench(&["sweep", cfg.to_str().unwrap()]).status.success());
    let o = clbench(&["report", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("5 delta rows"));
    let configs = ExperimentConfig::load(&cfg).unwrap();
    let dual = read_metrics(&configs[0].run_dir(1).join("metrics.csv")).unwrap();
    let single = read_metrics(&configs[1].run_dir(1).join("metrics.csv")).unwrap();
    let mut r = csv::Reader::from_path(out.join("report_deltas.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    for row in &rows {
        let m = &row[4];
        let d = dual.iter().find(|x| x.metric == m).unwrap().value;
        let s = single.iter().find(|x| x.metric == m).unwrap().value;
        assert_eq!(row[7].parse::<f64>().unwrap(), d - s, "{m}");
        assert_eq!(&row[2], "mlp3w12");
    }
}

fn fake_mnist(dir: &Path, per_class: usize) {
    let make = |n: usize| {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 10) as u8;
            labels.push(c);
            pixels.extend((0..784).map(|p| if p / 78 == c as usize { 200 + (i % 50) as u8 } else { (i * 7 % 13) as u8 }));
        }
        (encode_images(28, 28, &pixels), encode_labels(&labels))
    };
    fs::create_dir_all(dir).unwrap();
    let (i, l) = make(10 * per_class);
    fs::write(dir.join(TRAIN_IMAGES), i).unwrap();
    fs::write(dir.join(TRAIN_LABELS), l).unwrap();
    let (i, l) = make(10 * per_class / 2);
    fs::write(dir.join(TEST_IMAGES), i).unwrap();
    fs::write(dir.join(TEST_LABELS), l).unwrap();
}

#[test]
fn mnist_config_reads_data_env() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fake_mnist(&data, 12);
    let out = tmp.path().join("runs");
    let text = format!(
        r#"{{
  "schema_version": 1,
  "dataset": {{"kind": "mnist_idx", "max_train_per_class": 10}},
  "tasks": 5,
  "order_seeds": [1],
  "method": {{"name": "lwf", "lambda": 3, "local_ce": true}},
  "arch_stable": "mlp:2,32",
  "train": {{"epochs_first": 1, "epochs_rest": 1, "batch_size": 16, "lr0": 0.05}},
  "output": {{"dir": "{}", "checkpoints": "final"}}
}}"#,
        out.display()
    );
    let cfg = write(tmp.path(), "m.json", &text);
    let o = Command::new(env!("CARGO_BIN_EXE_clbench")).args(["run", cfg.to_str().unwrap()]).env("CLBENCH_DATA", &data).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(&out);
    let archived = fs::read_to_string(dir.join("config.json")).unwrap();
    assert!(archived.contains(data.to_str().unwrap()));
    assert!(dir.join("checkpoints/task_5/stable.json").exists());
    assert!(!dir.join("checkpoints/task_4").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_clbench")).args(["run", cfg.to_str().unwrap()]).env_remove("CLBENCH_DATA").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("CLBENCH_DATA"));
}
