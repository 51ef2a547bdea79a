//! Reader for the IDX binary format used by MNIST.
//!
//! Headers are big-endian: a 4-byte magic (`0x00000803` for 3-d unsigned
//! byte images, `0x00000801` for 1-d labels), then one `u32` per dimension.

use std::fs;
use std::path::{Path, PathBuf};

use clbench_core::data::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: wrong magic 0x{found:08x}, expected 0x{expected:08x}")]
    WrongMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, need {needed} bytes but file has {actual}")]
    Truncated { path: PathBuf, needed: u64, actual: u64 },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io { path: path.to_path_buf(), source })
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let head = 4 * (1 + dims);
    if bytes.len() < head {
        return Err(IdxError::Truncated { path: path.to_path_buf(), needed: head as u64, actual: bytes.len() as u64 });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let found = word(0);
    if found != magic {
        return Err(IdxError::WrongMagic { path: path.to_path_buf(), expected: magic, found });
    }
    let shape: Vec<usize> = (1..=dims).map(|i| word(i) as usize).collect();
    let needed = head as u64 + shape.iter().map(|&d| d as u64).product::<u64>();
    if (bytes.len() as u64) < needed {
        return Err(IdxError::Truncated { path: path.to_path_buf(), needed, actual: bytes.len() as u64 });
    }
    Ok(shape)
}

/// Raw labels from an IDX1 file.
pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    let bytes = read(path)?;
    let shape = header(&bytes, path, LABELS_MAGIC, 1)?;
    Ok(bytes[8..8 + shape[0]].to_vec())
}

/// Images from an IDX3 file as `(count, rows, cols, pixels)`.
pub fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), IdxError> {
    let bytes = read(path)?;
    let shape = header(&bytes, path, IMAGES_MAGIC, 3)?;
    let n = shape[0] * shape[1] * shape[2];
    Ok((shape[0], shape[1], shape[2], bytes[16..16 + n].to_vec()))
}

/// Loads an image/label file pair. Pixels are scaled to `[0, 1]`, samples
/// have shape `[rows, cols]` and the class count is `max(label) + 1`.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    let (n, rows, cols, pixels) = read_images(images)?;
    let y = read_labels(labels)?;
    if y.len() != n {
        return Err(IdxError::CountMismatch { images: n, labels: y.len() });
    }
    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<usize> = y.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, classes, vec![rows, cols])
        .map_err(|e| IdxError::Invalid { path: images.to_path_buf(), msg: e.to_string() })
}

/// Train and test splits from a directory holding the four standard files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset), IdxError> {
    let train = load_idx_dataset(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx_dataset(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// Encodes an IDX3 image file; used to write fixtures.
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
        let (i, l) = (dir.join("img"), dir.join("lbl"));
        fs::write(&i, images).unwrap();
        fs::write(&l, labels).unwrap();
        (i, l)
    }

    #[test]
    fn round_trip_and_normalisation() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 255, 51, 102, 0, 0, 0, 255];
        let (i, l) = fixture(dir.path(), &encode_images(2, 2, &pixels), &encode_labels(&[3, 1]));
        let ds = load_idx_dataset(&i, &l).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_shape(), &[2, 2]);
        assert_eq!(ds.num_classes(), 4);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.sample(0), &[0.0, 1.0, 0.2, 0.4]);
        assert!(ds.sample(1).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn labels_passed_as_images_is_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img = encode_images(2, 2, &[0; 8]);
        let (i, _) = fixture(dir.path(), &img, &encode_labels(&[0, 1]));
        let err = load_idx_dataset(&i, &i).unwrap_err();
        assert!(matches!(err, IdxError::WrongMagic { expected: LABELS_MAGIC, found: IMAGES_MAGIC, .. }), "{err}");
        assert!(err.to_string().contains("wrong magic"));
    }

    #[test]
    fn empty_and_short_files_are_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = encode_images(2, 2, &[0; 8]);
        img.pop();
        let (i, l) = fixture(dir.path(), &img, &[]);
        assert!(matches!(read_labels(&l), Err(IdxError::Truncated { needed: 8, actual: 0, .. })));
        assert!(matches!(read_images(&i), Err(IdxError::Truncated { needed: 24, actual: 23, .. })));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture(dir.path(), &encode_images(1, 1, &[1, 2, 3]), &encode_labels(&[0, 1]));
        assert!(matches!(load_idx_dataset(&i, &l), Err(IdxError::CountMismatch { images: 3, labels: 2 })));
    }

    #[test]
    fn missing_file_is_io() {
        let err = read_labels(Path::new("/nonexistent/labels")).unwrap_err();
        assert!(matches!(err, IdxError::Io { .. }));
    }
}
