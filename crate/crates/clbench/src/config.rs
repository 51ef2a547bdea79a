//! Experiment configuration files.
//!
//! A config is JSON with a `schema_version` field. Architecture presets are
//! expanded into full specs before validation, so the copy archived next to
//! the results is explicit and reproduces the run on its own.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use clbench_core::engine::{EngineConfig, TrainConfig};
use clbench_core::loss::LossConfig;
use clbench_core::methods::MethodConfig;
use clbench_core::nn::ArchSpec;
use clbench_core::optim::SgdConfig;
use clbench_core::Real;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the MNIST directory when a config gives none.
pub const DATA_ENV: &str = "CLBENCH_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// The four standard MNIST IDX files in `path` (or `$CLBENCH_DATA`).
    MnistIdx {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        /// Keep at most this many training images per class.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_train_per_class: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_test_per_class: Option<usize>,
        /// Seed of the per-class subsample.
        #[serde(default)]
        subsample_seed: u64,
    },
    /// Gaussian blobs; train and test samples come from one draw.
    SynthBlobs {
        num_classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        #[serde(default = "blob_std")]
        std: Real,
        #[serde(default)]
        seed: u64,
    },
}

fn blob_std() -> Real {
    clbench_core::data::BLOB_STD
}

/// An architecture as written by hand: a preset name or a full spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchRef {
    Preset(String),
    Spec(ArchSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_first: usize,
    pub epochs_rest: usize,
    pub batch_size: usize,
    pub lr0: Real,
    #[serde(default = "momentum")]
    pub momentum: Real,
    #[serde(default = "weight_decay")]
    pub weight_decay: Real,
    #[serde(default = "train_seed")]
    pub seed: u64,
    #[serde(default = "yes")]
    pub distill_on_replay: bool,
}

fn momentum() -> Real {
    0.9
}

fn weight_decay() -> Real {
    5e-4
}

fn train_seed() -> u64 {
    1993
}

fn yes() -> bool {
    true
}

impl TrainSection {
    pub fn to_engine(self) -> TrainConfig {
        TrainConfig {
            epochs_first: self.epochs_first,
            epochs_rest: self.epochs_rest,
            batch_size: self.batch_size,
            sgd: SgdConfig { lr: self.lr0, momentum: self.momentum, weight_decay: self.weight_decay },
            seed: self.seed,
            distill_on_replay: self.distill_on_replay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoints {
    #[default]
    EveryTask,
    Final,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default)]
    pub checkpoints: Checkpoints,
}

/// One entry of a sweep. Absent fields inherit from the base config;
/// `arch_plastic: "none"` selects the single-learner setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_stable: Option<ArchRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_plastic: Option<ArchRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossConfig>,
}

/// A config as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub tasks: usize,
    pub order_seeds: Vec<u64>,
    pub method: MethodConfig,
    pub arch_stable: ArchRef,
    /// `null` or `"none"` for the single-learner setting.
    #[serde(default)]
    pub arch_plastic: Option<ArchRef>,
    #[serde(default)]
    pub loss: LossConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub memory_budget: usize,
    pub output: OutputSection,
    /// Label carried by a config that was resolved from a sweep variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
}

/// A fully explicit config for one learner setup: presets are expanded
/// and there are no variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub tasks: usize,
    pub order_seeds: Vec<u64>,
    pub method: MethodConfig,
    pub arch_stable: ArchSpec,
    pub arch_plastic: Option<ArchSpec>,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub memory_budget: usize,
    pub output: OutputSection,
    /// Sweep variant this config came from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

/// A config problem, with the line it refers to when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: usize,
    pub column: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "{}:{}:{}: {}", self.path.display(), self.line, self.column, self.msg)
        } else {
            write!(f, "{}: {}", self.path.display(), self.msg)
        }
    }
}

impl std::error::Error for ConfigError {}

/// Facts about the dataset that validation needs without loading it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataShape {
    pub num_classes: usize,
    pub feature_len: usize,
}

pub const MNIST_SHAPE: DataShape = DataShape { num_classes: 10, feature_len: 784 };

impl DatasetConfig {
    pub fn shape(&self) -> DataShape {
        match *self {
            DatasetConfig::MnistIdx { .. } => MNIST_SHAPE,
            DatasetConfig::SynthBlobs { num_classes, dim, .. } => DataShape { num_classes, feature_len: dim },
        }
    }

    /// MNIST directory: the config's path, else `$CLBENCH_DATA`.
    pub fn data_dir(&self) -> Option<PathBuf> {
        match self {
            DatasetConfig::MnistIdx { path: Some(p), .. } => Some(p.clone()),
            DatasetConfig::MnistIdx { path: None, .. } => std::env::var_os(DATA_ENV).map(PathBuf::from),
            DatasetConfig::SynthBlobs { .. } => None,
        }
    }
}

/// 1-based line and column of the first occurrence of `"key"` in `text`.
fn locate(text: &str, key: &str) -> (usize, usize) {
    let needle = format!("\"{}\"", key);
    for (i, line) in text.lines().enumerate() {
        if let Some(col) = line.find(&needle) {
            return (i + 1, col + 1);
        }
    }
    (0, 0)
}

struct Anchored<'t> {
    path: &'t Path,
    text: &'t str,
}

impl Anchored<'_> {
    fn err(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        let (line, column) = locate(self.text, key);
        ConfigError { path: self.path.to_path_buf(), line, column, msg: msg.into() }
    }
}

fn expand(arch: &ArchRef, shape: DataShape) -> Result<ArchSpec, String> {
    match arch {
        ArchRef::Preset(name) => ArchSpec::preset(name, shape.num_classes, shape.feature_len).map_err(|e| e.to_string()),
        ArchRef::Spec(spec) => Ok(spec.clone()),
    }
}

fn expand_plastic(arch: &Option<ArchRef>, shape: DataShape) -> Result<Option<ArchSpec>, String> {
    match arch {
        None => Ok(None),
        Some(ArchRef::Preset(name)) if name == "none" => Ok(None),
        Some(a) => expand(a, shape).map(Some),
    }
}

impl RawConfig {
    pub fn parse(text: &str, path: &Path) -> Result<RawConfig, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string().split(" at line ").next().unwrap_or_default().to_string(),
        })
    }

    /// Expands presets and validates; one config per variant, or just the
    /// base when there are none.
    pub fn resolve(&self, text: &str, path: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
        let at = Anchored { path, text };
        let base = self.resolve_one(&at, None)?;
        if self.variants.is_empty() {
            return Ok(vec![base]);
        }
        let mut labels = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for v in &self.variants {
            if !labels.insert(v.label.as_str()) {
                return Err(at.err("label", format!("duplicate variant label `{}`", v.label)));
            }
            out.push(self.resolve_one(&at, Some(v))?);
        }
        Ok(out)
    }

    fn resolve_one(&self, at: &Anchored<'_>, v: Option<&Variant>) -> Result<ExperimentConfig, ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(at.err("schema_version", format!("unsupported schema_version {}, expected {}", self.schema_version, SCHEMA_VERSION)));
        }
        let shape = self.dataset.shape();
        let stable_ref = v.and_then(|v| v.arch_stable.as_ref()).unwrap_or(&self.arch_stable);
        let arch_stable = expand(stable_ref, shape).map_err(|m| at.err("arch_stable", m))?;
        let plastic_ref = match v.and_then(|v| v.arch_plastic.as_ref()) {
            Some(p) => Some(p.clone()),
            None => self.arch_plastic.clone(),
        };
        let arch_plastic = expand_plastic(&plastic_ref, shape).map_err(|m| at.err("arch_plastic", m))?;
        let cfg = ExperimentConfig {
            schema_version: self.schema_version,
            dataset: self.dataset.clone(),
            tasks: self.tasks,
            order_seeds: self.order_seeds.clone(),
            method: v.and_then(|v| v.method.clone()).unwrap_or_else(|| self.method.clone()),
            arch_stable,
            arch_plastic,
            loss: v.and_then(|v| v.loss).unwrap_or(self.loss),
            train: self.train,
            memory_budget: v.and_then(|v| v.memory_budget).unwrap_or(self.memory_budget),
            output: self.output.clone(),
            variant: v.map(|v| v.label.clone()).or_else(|| self.variant.clone()),
        };
        cfg.validate_with(at)?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    /// Reads and resolves a config file; see [`RawConfig::resolve`].
    pub fn load(path: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { path: path.to_path_buf(), line: 0, column: 0, msg: e.to_string() })?;
        RawConfig::parse(&text, path)?.resolve(&text, path)
    }

    fn validate_with(&self, at: &Anchored<'_>) -> Result<(), ConfigError> {
        let shape = self.dataset.shape();
        if let DatasetConfig::SynthBlobs { num_classes, per_class, test_per_class, dim, std, .. } = self.dataset {
            if num_classes == 0 || per_class == 0 || test_per_class == 0 || dim == 0 {
                return Err(at.err("dataset", "synth_blobs sizes must be positive"));
            }
            if !(std >= 0.0 && std.is_finite()) {
                return Err(at.err("std", "std must be non-negative"));
            }
        }
        if let DatasetConfig::MnistIdx { max_train_per_class: Some(0), .. } | DatasetConfig::MnistIdx { max_test_per_class: Some(0), .. } = self.dataset {
            return Err(at.err("dataset", "per-class caps must be positive"));
        }
        if self.tasks == 0 || !shape.num_classes.is_multiple_of(self.tasks) {
            return Err(at.err("tasks", format!("{} classes cannot be split into {} equal tasks", shape.num_classes, self.tasks)));
        }
        if self.order_seeds.is_empty() {
            return Err(at.err("order_seeds", "order_seeds must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.order_seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(at.err("order_seeds", format!("order seed {} listed twice", s)));
        }
        self.method.validate().map_err(|e| at.err("method", e.to_string()))?;
        self.loss.validate().map_err(|e| at.err("loss", e.to_string()))?;
        self.train.to_engine().validate().map_err(|e| at.err("train", e.to_string()))?;
        let check_arch = |spec: &ArchSpec, key: &str| -> Result<(), ConfigError> {
            spec.validate().map_err(|e| at.err(key, e.to_string()))?;
            let n: usize = spec.input_shape.iter().product();
            if n != shape.feature_len {
                return Err(at.err(key, format!("input shape {:?} does not fit {}-value samples", spec.input_shape, shape.feature_len)));
            }
            Ok(())
        };
        check_arch(&self.arch_stable, "arch_stable")?;
        if let Some(p) = &self.arch_plastic {
            check_arch(p, "arch_plastic")?;
            if p.input_shape != self.arch_stable.input_shape {
                return Err(at.err("arch_plastic", format!("input shape {:?} differs from the stable learner's {:?}", p.input_shape, self.arch_stable.input_shape)));
            }
        }
        if self.memory_budget > 0 && self.memory_budget < shape.num_classes {
            return Err(at.err(
                "memory_budget",
                format!("memory_budget {} cannot hold one exemplar for each of {} classes", self.memory_budget, shape.num_classes),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).unwrap_or_default();
        self.validate_with(&Anchored { path: Path::new("<config>"), text: &text })
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig { train: self.train.to_engine(), loss: self.loss, memory_budget: self.memory_budget }
    }

    /// The same config restricted to one order seed.
    pub fn for_seed(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig { order_seeds: vec![seed], ..self.clone() }
    }

    /// Hex digest identifying everything that shapes a run's results; the
    /// order seeds, output settings and data directory are excluded.
    pub fn hash(&self) -> String {
        let mut key = self.clone();
        key.order_seeds.clear();
        if let DatasetConfig::MnistIdx { path, .. } = &mut key.dataset {
            *path = None;
        }
        key.output = OutputSection { dir: PathBuf::new(), checkpoints: Checkpoints::None };
        let json = serde_json::to_vec(&key).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..6])
    }

    /// `{hash}-{seed}`.
    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-{}", self.hash(), seed)
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output.dir.join(self.run_id(seed))
    }

    pub fn plastic_label(&self) -> String {
        self.arch_plastic.as_ref().map_or_else(|| String::from("none"), ArchSpec::label)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
