use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::Dataset;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// A class-incremental sequence of tasks over disjoint class groups.
///
/// Labels in `train` and `test` are rewritten to positions in the class
/// order, so task `k` owns the contiguous label range
/// `k * classes_per_task .. (k + 1) * classes_per_task`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// `class_order[i]` is the original label of incremental class `i`.
    pub class_order: Vec<usize>,
    pub order_seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    train_idx: Vec<Vec<usize>>,
    test_idx: Vec<Vec<usize>>,
}

/// Splits `train`/`test` into `k` tasks of `num_classes / k` classes each,
/// in an order given by a permutation seeded with `order_seed`.
pub fn split_tasks(mut train: Dataset, mut test: Dataset, k: usize, order_seed: u64) -> Result<TaskStream> {
    let n = train.num_classes();
    if test.num_classes() != n || test.feature_shape() != train.feature_shape() {
        return Err(Error::InvalidArgument("train and test sets disagree on classes or feature shape".into()));
    }
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!("{} classes cannot be split into {} equal tasks", n, k)));
    }
    let mut class_order: Vec<usize> = (0..n).collect();
    class_order.shuffle(&mut rng::stream(order_seed, &[rng::tag::CLASS_ORDER]));
    let mut inverse = alloc::vec![0; n];
    for (pos, &c) in class_order.iter().enumerate() {
        inverse[c] = pos;
    }
    train.relabel(&inverse)?;
    test.relabel(&inverse)?;
    let per = n / k;
    let by_task = |ds: &Dataset| -> Vec<Vec<usize>> {
        let mut out = alloc::vec![Vec::new(); k];
        for (i, &y) in ds.labels().iter().enumerate() {
            out[y / per].push(i);
        }
        out
    };
    let train_idx = by_task(&train);
    let test_idx = by_task(&test);
    Ok(TaskStream { num_tasks: k, classes_per_task: per, class_order, order_seed, train, test, train_idx, test_idx })
}

impl TaskStream {
    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    /// Incremental labels of task `k`.
    pub fn task_classes(&self, k: usize) -> core::ops::Range<usize> {
        k * self.classes_per_task..(k + 1) * self.classes_per_task
    }

    /// Original labels of task `k`.
    pub fn task_original_classes(&self, k: usize) -> &[usize] {
        &self.class_order[self.task_classes(k)]
    }

    pub fn task_of_class(&self, c: usize) -> usize {
        c / self.classes_per_task
    }

    pub fn train_indices(&self, k: usize) -> &[usize] {
        &self.train_idx[k]
    }

    pub fn test_indices(&self, k: usize) -> &[usize] {
        &self.test_idx[k]
    }

    /// Test indices of tasks `0..=k`.
    pub fn joint_test_indices(&self, k: usize) -> Vec<usize> {
        self.test_idx[..=k].iter().flatten().copied().collect()
    }
}

/// Shuffles `indices` and cuts them into batches of at most `batch_size`.
pub fn shuffled_batches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use alloc::vec;

    fn stream(k: usize, seed: u64) -> TaskStream {
        split_tasks(synth_blobs(10, 6, 4, 1).unwrap(), synth_blobs(10, 3, 4, 2).unwrap(), k, seed).unwrap()
    }

    #[test]
    fn five_tasks_partition_the_classes() {
        let s = stream(5, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|k| s.task_original_classes(k).to_vec()).collect();
        assert_eq!(s.classes_per_task, 2);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for k in 0..5 {
            assert_eq!(s.train_indices(k).len(), 12);
            assert_eq!(s.test_indices(k).len(), 6);
            for &i in s.train_indices(k) {
                assert!(s.task_classes(k).contains(&s.train.labels()[i]));
            }
            for &i in s.test_indices(k) {
                assert!(s.task_classes(k).contains(&s.test.labels()[i]));
            }
        }
    }

    #[test]
    fn single_task_is_the_joint_problem() {
        let s = stream(1, 3);
        assert_eq!(s.train_indices(0).len(), 60);
        assert_eq!(s.task_classes(0), 0..10);
    }

    #[test]
    fn order_depends_only_on_seed() {
        assert_eq!(stream(5, 1), stream(5, 1));
        let (a, b) = (stream(5, 1), stream(5, 2));
        assert_ne!(a.class_order, b.class_order);
        let mut sa = a.class_order.clone();
        let mut sb = b.class_order.clone();
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
    }

    #[test]
    fn relabelling_maps_back_to_original_labels() {
        let train = synth_blobs(10, 6, 4, 1).unwrap();
        let s = split_tasks(train.clone(), synth_blobs(10, 3, 4, 2).unwrap(), 5, 4).unwrap();
        for i in 0..train.len() {
            assert_eq!(s.class_order[s.train.labels()[i]], train.labels()[i]);
            assert_eq!(s.train.sample(i), train.sample(i));
        }
    }

    #[test]
    fn non_divisible_split_is_an_error() {
        let r = split_tasks(synth_blobs(10, 2, 4, 1).unwrap(), synth_blobs(10, 2, 4, 1).unwrap(), 3, 1);
        assert!(r.is_err());
    }

    #[test]
    fn batches_cover_indices_once() {
        let idx: Vec<usize> = (10..47).collect();
        let mut r = rng::stream(1, &[]);
        let b = shuffled_batches(&idx, 8, &mut r);
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, idx);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![8, 8, 8, 8, 5]);
    }
}
