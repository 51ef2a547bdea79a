//! Datasets, class-incremental task streams and the exemplar memory.

mod memory;
mod stream;

pub use memory::{herding_select, ExemplarMemory};
pub use stream::{shuffled_batches, split_tasks, TaskStream};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::rng;
use crate::tensor::numel;
use crate::{Error, Real, Result, Tensor};

/// Labelled samples with a common feature shape. Features are kept in
/// single precision and widened when a batch is assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    feature_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<f32>, labels: Vec<usize>, num_classes: usize, feature_shape: Vec<usize>) -> Result<Self> {
        let per = numel(&feature_shape);
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                msg: format!("{} values for {} samples of shape {:?}", features.len(), labels.len(), feature_shape),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        Ok(Dataset { features, labels, num_classes, feature_shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_len(&self) -> usize {
        numel(&self.feature_shape)
    }

    /// Reinterprets every sample with a new shape of the same size, e.g.
    /// `[28, 28]` to `[784]` for an MLP or `[1, 28, 28]` for a conv net.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.feature_len() {
            return Err(Error::ShapeMismatch { op: "dataset reshape", lhs: self.feature_shape, rhs: shape.to_vec() });
        }
        self.feature_shape = shape.to_vec();
        Ok(self)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.feature_len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Samples `indices` as a `[n, ...feature_shape]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| v as Real));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("sized"), labels)
    }

    /// Indices of every sample of class `c`, in storage order.
    pub fn indices_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            feature_shape: self.feature_shape.clone(),
        }
    }

    /// Keeps at most `max_per_class` samples of every class, chosen by a
    /// seeded shuffle; the survivors keep their original relative order.
    pub fn subsample_per_class(&self, max_per_class: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, &[rng::tag::SUBSAMPLE]);
        let mut keep = vec![false; self.len()];
        for c in 0..self.num_classes {
            let mut idx = self.indices_of_class(c);
            idx.shuffle(&mut r);
            for &i in idx.iter().take(max_per_class) {
                keep[i] = true;
            }
        }
        let kept: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        self.subset(&kept)
    }

    /// Replaces every label `y` with `map[y]`.
    pub fn relabel(&mut self, map: &[usize]) -> Result<()> {
        if map.len() != self.num_classes || map.iter().any(|&m| m >= self.num_classes) {
            return Err(Error::InvalidArgument(format!("label map {:?} is not a map over {} classes", map, self.num_classes)));
        }
        for y in &mut self.labels {
            *y = map[*y];
        }
        Ok(())
    }
}

/// Standard deviation of the isotropic noise around each blob centre.
pub const BLOB_STD: Real = 0.15;

/// Gaussian clusters around unit-norm class centres. When `dim >=
/// num_classes` the centres are the first coordinate axes, so every pair is
/// `sqrt(2)` apart; otherwise they are seeded random unit vectors.
pub fn synth_blobs(num_classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_with_std(num_classes, per_class, dim, BLOB_STD, seed)
}

pub fn synth_blobs_with_std(num_classes: usize, per_class: usize, dim: usize, std: Real, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 {
        return Err(Error::InvalidArgument("synth_blobs needs at least one class and one dimension".into()));
    }
    let mut r = rng::stream(seed, &[rng::tag::DATA]);
    let centres: Vec<Vec<Real>> = (0..num_classes)
        .map(|c| {
            if dim >= num_classes {
                let mut v = vec![0.0; dim];
                v[c] = 1.0;
                v
            } else {
                let v: Vec<Real> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                let n = crate::math::sqrt(v.iter().map(|x| x * x).sum::<Real>()).max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            }
        })
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (c, centre) in centres.iter().enumerate() {
            for &m in centre {
                let z: Real = StandardNormal.sample(&mut r);
                features.push((m + std * z) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes, vec![dim])
}
