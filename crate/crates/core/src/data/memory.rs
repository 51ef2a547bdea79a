use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::Dataset;
use crate::{Error, Real, Result, Tensor};

const TIE_TOL: Real = 1e-12;

/// Greedy mean-matching order over the rows of `features` (`[n, d]`).
///
/// Step `j` picks the unselected row minimising
/// `|mu - (s + x) / (j + 1)|`, where `mu` is the mean of all rows and `s`
/// the sum of rows picked so far. Ties (equal up to rounding, relative
/// 1e-12) go to the lowest row index.
pub fn herding_select(features: &Tensor, m: usize) -> Vec<usize> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        _ => (0, 0),
    };
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let x = features.data();
    let mut mu = vec![0.0 as Real; d];
    for i in 0..n {
        for (a, &v) in mu.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *a += v;
        }
    }
    for a in &mut mu {
        *a /= n as Real;
    }
    let mut sum = vec![0.0 as Real; d];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(m);
    for j in 0..m {
        let denom = (j + 1) as Real;
        let mut best: Option<(usize, Real)> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let row = &x[i * d..(i + 1) * d];
            let mut dist = 0.0;
            for k in 0..d {
                let diff = mu[k] - (sum[k] + row[k]) / denom;
                dist += diff * diff;
            }
            if best.is_none_or(|(_, b)| dist < b - TIE_TOL * b.max(1e-300)) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("m <= n leaves a candidate");
        taken[i] = true;
        for (s, &v) in sum.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *s += v;
        }
        order.push(i);
    }
    order
}

/// Fixed-budget replay buffer holding training-set indices per class, each
/// list in herding order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExemplarMemory {
    budget: usize,
    per_class: Vec<Vec<usize>>,
}

impl ExemplarMemory {
    /// A budget of zero disables the memory: updates leave it empty.
    pub fn new(budget: usize) -> Self {
        ExemplarMemory { budget, per_class: Vec::new() }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn classes_seen(&self) -> usize {
        self.per_class.len()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn exemplars(&self, class: usize) -> &[usize] {
        self.per_class.get(class).map_or(&[], Vec::as_slice)
    }

    /// Every stored index, class by class.
    pub fn indices(&self) -> Vec<usize> {
        self.per_class.concat()
    }

    /// Per-class allocation once `classes_seen` classes are stored.
    pub fn quota(&self, classes_seen: usize) -> Result<usize> {
        if classes_seen == 0 || self.budget < classes_seen {
            return Err(Error::InvalidArgument(format!(
                "memory budget {} cannot hold one exemplar for each of {} classes",
                self.budget, classes_seen
            )));
        }
        Ok(self.budget / classes_seen)
    }

    /// Adds `new_classes` (which must directly follow the stored ones) and
    /// rebalances. Old lists are cut to a prefix of their herding order; new
    /// classes are selected by herding over `features(indices)`, which must
    /// return one row per index.
    pub fn update<F>(&mut self, ds: &Dataset, new_classes: Range<usize>, mut features: F) -> Result<()>
    where
        F: FnMut(&[usize]) -> Result<Tensor>,
    {
        if self.budget == 0 {
            return Ok(());
        }
        if new_classes.start != self.per_class.len() {
            return Err(Error::InvalidArgument(format!(
                "memory holds {} classes, cannot add classes starting at {}",
                self.per_class.len(),
                new_classes.start
            )));
        }
        let quota = self.quota(new_classes.end)?;
        for list in &mut self.per_class {
            list.truncate(quota);
        }
        for c in new_classes {
            let idx = ds.indices_of_class(c);
            let feats = features(&idx)?;
            if feats.shape().first() != Some(&idx.len()) {
                return Err(Error::ShapeMismatch { op: "memory_update", lhs: feats.shape().to_vec(), rhs: vec![idx.len()] });
            }
            let order = herding_select(&feats, quota);
            self.per_class.push(order.into_iter().map(|i| idx[i]).collect());
        }
        Ok(())
    }
}
