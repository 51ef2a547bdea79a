//! Network checkpoints: one flat little-endian binary file plus a JSON
//! manifest listing each tensor's name, shape, dtype and byte offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use clbench_core::nn::{ArchSpec, Network};
use clbench_core::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Binary file, relative to the manifest.
    pub data_file: String,
    pub arch: ArchSpec,
    pub num_classes: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] clbench_core::Error),
}

pub fn dtype_name() -> &'static str {
    if core::mem::size_of::<Real>() == 8 {
        "f64"
    } else {
        "f32"
    }
}

/// Writes `{stem}.bin` and `{stem}.json` into `dir`.
pub fn save(net: &Network, dir: &Path, stem: &str) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in net.named_tensors() {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), dtype: dtype_name().into(), offset: bytes.len() as u64 });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let data_file = format!("{}.bin", stem);
    fs::write(dir.join(&data_file), &bytes)?;
    let manifest = Manifest { format_version: 1, data_file, arch: net.spec().clone(), num_classes: net.num_classes(), tensors };
    fs::write(dir.join(format!("{}.json", stem)), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Rebuilds the network described by a manifest and loads its tensors.
pub fn load(manifest_path: &Path) -> Result<Network, CheckpointError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&manifest.data_file))?;
    let width = core::mem::size_of::<Real>();
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != dtype_name() {
            return Err(CheckpointError::Invalid(format!("tensor `{}` is {}, this build reads {}", e.name, e.dtype, dtype_name())));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * width;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| CheckpointError::Invalid(format!("tensor `{}` runs past the end of {}", e.name, manifest.data_file)))?;
        let data = raw.chunks_exact(width).map(|c| Real::from_le_bytes(c.try_into().unwrap())).collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let mut net = Network::build(&manifest.arch.clone().with_classes(manifest.num_classes), 0)?;
    net.load_named_tensors(&named)?;
    Ok(net)
}
