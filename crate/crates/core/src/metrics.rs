//! Accuracy bookkeeping and the stability/plasticity measures derived from
//! it.
//!
//! Steps and tasks are 0-based in storage. The forgetting functions take
//! `k`, the number of tasks learned so far (1-based), to match their usual
//! definitions. All results are percentages except [`rf`], a fraction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An exact `correct / total` tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Count {
    pub correct: u64,
    pub total: u64,
}

impl Count {
    pub fn new(correct: u64, total: u64) -> Self {
        Count { correct, total }
    }

    pub fn percent(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Row `k` holds the per-task tallies after learning task `k` (entries for
/// tasks `0..=k`) and the tally on the joint test set of those tasks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub per_task: Vec<Vec<Count>>,
    pub joint: Vec<Count>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix::default()
    }

    pub fn steps(&self) -> usize {
        self.per_task.len()
    }

    /// Appends the evaluation after the next task.
    pub fn push_step(&mut self, per_task: Vec<Count>, joint: Count) -> Result<()> {
        if per_task.len() != self.steps() + 1 {
            return Err(Error::InvalidArgument(format!(
                "step {} needs {} per-task entries, got {}",
                self.steps(),
                self.steps() + 1,
                per_task.len()
            )));
        }
        self.per_task.push(per_task);
        self.joint.push(joint);
        Ok(())
    }

    /// `a[k][b]` in percent, for `b <= k`.
    pub fn accuracy(&self, k: usize, b: usize) -> f64 {
        self.per_task[k][b].percent()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.per_task.iter().map(|r| r.iter().map(|c| c.percent()).collect()).collect()
    }

    pub fn joint_percent(&self) -> Vec<f64> {
        self.joint.iter().map(|c| c.percent()).collect()
    }

    /// Peak accuracy on task `b` over every step up to and including `k`.
    pub fn peak(&self, k: usize, b: usize) -> f64 {
        (b..=k).map(|s| self.accuracy(s, b)).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_rows(a: &[Vec<f64>]) -> Result<()> {
    for (k, row) in a.iter().enumerate() {
        if row.len() != k + 1 {
            return Err(Error::InvalidArgument(format!("row {} has {} entries, expected {}", k, row.len(), k + 1)));
        }
    }
    Ok(())
}

/// Mean of the diagonal: accuracy on each task right after learning it.
pub fn aan(a: &[Vec<f64>]) -> Result<f64> {
    check_rows(a)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("AAN needs at least one step".into()));
    }
    Ok(a.iter().enumerate().map(|(k, r)| r[k]).sum::<f64>() / a.len() as f64)
}

/// Current and peak-past accuracy of each earlier task after `k` tasks.
/// The peak runs over steps before `k`, so improvement on an old task
/// counts as negative forgetting.
fn current_and_peak(a: &[Vec<f64>], k: usize, what: &str) -> Result<Vec<(f64, f64)>> {
    check_rows(a)?;
    if k < 2 || k > a.len() {
        return Err(Error::InvalidArgument(format!("{} is defined for 2 <= k <= {}, got k = {}", what, a.len(), k)));
    }
    let now = k - 1;
    Ok((0..now)
        .map(|b| {
            let peak = (b..now).map(|s| a[s][b]).fold(f64::NEG_INFINITY, f64::max);
            (a[now][b], peak)
        })
        .collect())
}

/// `AF_k = 1/(k-1) * sum_{b<k} (a*_b - a_b)`.
pub fn af(a: &[Vec<f64>], k: usize) -> Result<f64> {
    let terms = current_and_peak(a, k, "AF")?;
    Ok(terms.iter().map(|(cur, peak)| peak - cur).sum::<f64>() / (k - 1) as f64)
}

/// `RF_k = 1/(k-1) * sum_{b<k} (1 - a_b / a*_b)`.
pub fn rf(a: &[Vec<f64>], k: usize) -> Result<f64> {
    let terms = current_and_peak(a, k, "RF")?;
    let mut s = 0.0;
    for (b, (cur, peak)) in terms.iter().enumerate() {
        if *peak <= 0.0 {
            return Err(Error::InvalidArgument(format!("RF undefined: task {} never had non-zero accuracy", b)));
        }
        s += 1.0 - cur / peak;
    }
    Ok(s / (k - 1) as f64)
}

/// `(LA, AIA)`: last joint accuracy and the mean joint accuracy over steps.
pub fn la_aia(joint: &[f64]) -> Result<(f64, f64)> {
    let last = *joint.last().ok_or_else(|| Error::InvalidArgument("LA/AIA need at least one step".into()))?;
    Ok((last, joint.iter().sum::<f64>() / joint.len() as f64))
}

/// Every scalar measure of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub aan: f64,
    /// `AF_k` for `k = 2..=K`; empty for a single task.
    pub af: Vec<f64>,
    pub rf: Vec<Option<f64>>,
    pub faf: Option<f64>,
    pub frf: Option<f64>,
    pub la: f64,
    pub aia: f64,
}

pub fn summarize(m: &AccuracyMatrix) -> Result<Summary> {
    let a = m.rows();
    let kk = a.len();
    let af_series: Vec<f64> = (2..=kk).map(|k| af(&a, k)).collect::<Result<_>>()?;
    let rf_series: Vec<Option<f64>> = (2..=kk).map(|k| rf(&a, k).ok()).collect();
    let (la, aia) = la_aia(&m.joint_percent())?;
    Ok(Summary {
        aan: aan(&a)?,
        faf: af_series.last().copied(),
        frf: rf_series.last().copied().flatten(),
        af: af_series,
        rf: rf_series,
        la,
        aia,
    })
}

/// `counts[i][j]`: test samples of task `i` predicted as a class of task `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Rows scaled to sum to one; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }
}

/// Task-level confusion of class predictions, for tasks owning contiguous
/// blocks of `classes_per_task` labels.
pub fn task_confusion(labels: &[usize], predictions: &[usize], classes_per_task: usize, num_tasks: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::InvalidArgument(format!("{} labels but {} predictions", labels.len(), predictions.len())));
    }
    let classes = classes_per_task * num_tasks;
    let mut counts = vec![vec![0u64; num_tasks]; num_tasks];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= classes || p >= classes {
            return Err(Error::LabelOutOfRange { label: y.max(p), classes });
        }
        counts[y / classes_per_task][p / classes_per_task] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn aan_examples() {
        let a = vec![vec![90.0], vec![0.0, 80.0], vec![0.0, 0.0, 70.0]];
        assert!(close(aan(&a).unwrap(), 80.0));
        assert_eq!(aan(&[vec![42.5]]).unwrap(), 42.5);
        assert!(aan(&[]).is_err());
    }

    /// Past peaks [90, 80] and current [60, 70] at the third step.
    fn hand_matrix() -> Vec<Vec<f64>> {
        vec![vec![90.0], vec![85.0, 80.0], vec![60.0, 70.0, 95.0]]
    }

    #[test]
    fn af_examples() {
        assert!(close(af(&hand_matrix(), 3).unwrap(), 20.0));
        let flat = vec![vec![50.0], vec![50.0, 60.0], vec![50.0, 60.0, 70.0]];
        assert_eq!(af(&flat, 3).unwrap(), 0.0);
        let improving = vec![vec![50.0], vec![55.0, 60.0], vec![70.0, 80.0, 70.0]];
        assert!(af(&improving, 3).unwrap() < 0.0);
        assert!(af(&flat, 1).is_err());
    }

    #[test]
    fn rf_examples() {
        let v = rf(&hand_matrix(), 3).unwrap();
        assert!(close(v, 0.5 * ((1.0 - 60.0 / 90.0) + (1.0 - 70.0 / 80.0))));
        assert!((v - 0.2292).abs() < 5e-5);
        let flat = vec![vec![50.0], vec![50.0, 60.0]];
        assert_eq!(rf(&flat, 2).unwrap(), 0.0);
        let halved = vec![vec![80.0], vec![40.0, 60.0], vec![40.0, 30.0, 10.0]];
        assert!(close(rf(&halved, 3).unwrap(), 0.5));
        let never = vec![vec![0.0], vec![0.0, 60.0]];
        assert!(rf(&never, 2).is_err());
    }

    #[test]
    fn la_aia_examples() {
        assert_eq!(la_aia(&[90.0, 80.0, 70.0]).unwrap(), (70.0, 80.0));
        let (la, aia) = la_aia(&[33.0]).unwrap();
        assert_eq!(la, aia);
    }

    /// A 3-step run tallied by hand: diagonal 98/100, 95/100, 90/100; joint
    /// accuracies 98%, 80%, 70%.
    #[test]
    fn recorded_toy_run() {
        let mut m = AccuracyMatrix::new();
        m.push_step(vec![Count::new(98, 100)], Count::new(98, 100)).unwrap();
        m.push_step(vec![Count::new(64, 100), Count::new(95, 100)], Count::new(160, 200)).unwrap();
        m.push_step(vec![Count::new(40, 100), Count::new(80, 100), Count::new(90, 100)], Count::new(210, 300))
            .unwrap();
        let s = summarize(&m).unwrap();
        assert!(close(s.aan, (98.0 + 95.0 + 90.0) / 3.0));
        assert!(close(s.af[0], 98.0 - 64.0));
        assert!(close(s.faf.unwrap(), ((98.0 - 40.0) + (95.0 - 80.0)) / 2.0));
        assert!(close(s.frf.unwrap(), ((1.0 - 40.0 / 98.0) + (1.0 - 80.0 / 95.0)) / 2.0));
        assert!(close(s.la, 70.0));
        assert!(close(s.aia, (98.0 + 80.0 + 70.0) / 3.0));
        assert!(m.push_step(vec![Count::new(1, 1)], Count::new(1, 1)).is_err());
    }

    #[test]
    fn confusion_examples() {
        let labels = [0, 1, 2, 3, 2, 0];
        let perfect = task_confusion(&labels, &labels, 2, 2).unwrap();
        assert_eq!(perfect.counts, vec![vec![3, 0], vec![0, 3]]);
        let fixed = task_confusion(&labels, &[3; 6], 2, 2).unwrap();
        assert_eq!(fixed.counts, vec![vec![0, 3], vec![0, 3]]);
        assert_eq!(fixed.normalized(), vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert!(task_confusion(&labels, &[4; 6], 2, 2).is_err());
    }

    #[test]
    fn random_predictions_rows_sum_to_test_sizes() {
        let mut r = rng::stream(5, &[]);
        let labels: Vec<usize> = (0..57).map(|_| r.random_range(0..4)).collect();
        let preds: Vec<usize> = (0..57).map(|_| r.random_range(0..4)).collect();
        let c = task_confusion(&labels, &preds, 2, 2).unwrap();
        for t in 0..2 {
            let size = labels.iter().filter(|&&y| y / 2 == t).count() as u64;
            assert_eq!(c.counts[t].iter().sum::<u64>(), size);
        }
    }

    // Term-by-term restatements of the definitions, written without sharing
    // any helper with the implementation.
    fn brute_aan(a: &[Vec<f64>]) -> f64 {
        let mut s = 0.0;
        for k in 0..a.len() {
            s += a[k][k];
        }
        s / a.len() as f64
    }

    fn brute_peak(a: &[Vec<f64>], b: usize, k: usize) -> f64 {
        let mut best = a[b][b];
        let mut s = b + 1;
        while s < k - 1 {
            if a[s][b] > best {
                best = a[s][b];
            }
            s += 1;
        }
        best
    }

    fn brute_af(a: &[Vec<f64>], k: usize) -> f64 {
        let mut s = 0.0;
        for b in 0..k - 1 {
            s += brute_peak(a, b, k) - a[k - 1][b];
        }
        s / (k as f64 - 1.0)
    }

    fn brute_rf(a: &[Vec<f64>], k: usize) -> f64 {
        let mut s = 0.0;
        for b in 0..k - 1 {
            s += 1.0 - a[k - 1][b] / brute_peak(a, b, k);
        }
        s / (k as f64 - 1.0)
    }

    fn matrix(n: usize) -> impl Strategy<Value = (Vec<Vec<u64>>, Vec<u64>)> {
        (
            prop::collection::vec(prop::collection::vec(1u64..=200, n), n),
            prop::collection::vec(0u64..=500, n),
        )
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force((cells, joint) in matrix(5)) {
            let mut m = AccuracyMatrix::new();
            for k in 0..5 {
                let row = (0..=k).map(|b| Count::new(cells[k][b], 200)).collect();
                m.push_step(row, Count::new(joint[k], 500)).unwrap();
            }
            let a = m.rows();
            prop_assert!((aan(&a).unwrap() - brute_aan(&a)).abs() <= 1e-9);
            for k in 2..=5 {
                prop_assert!((af(&a, k).unwrap() - brute_af(&a, k)).abs() <= 1e-9);
                prop_assert!((rf(&a, k).unwrap() - brute_rf(&a, k)).abs() <= 1e-9);
            }
            let j = m.joint_percent();
            let (la, aia) = la_aia(&j).unwrap();
            prop_assert_eq!(la, 100.0 * joint[4] as f64 / 500.0);
            prop_assert!((aia - j.iter().sum::<f64>() / 5.0).abs() <= 1e-9);
        }

        /// With no task improving past its peak, every term is
        /// non-negative: AF and RF share a sign and
        /// RF <= AF / min(a*) holds term by term.
        #[test]
        fn forgetting_sign_and_bound(peaks in prop::collection::vec(1u64..=200, 4), drops in prop::collection::vec(0.0f64..=1.0, 16)) {
            let mut a: Vec<Vec<f64>> = Vec::new();
            for k in 0..4 {
                let row = (0..=k).map(|b| {
                    let p = 100.0 * peaks[b] as f64 / 200.0;
                    if b == k { p } else { p * (1.0 - drops[4 * k + b]) }
                }).collect();
                a.push(row);
            }
            // Keep every earlier row at the peak so drops are measured against it.
            for k in 1..3 {
                for b in 0..k {
                    a[k][b] = a[b][b];
                }
            }
            let (afk, rfk) = (af(&a, 4).unwrap(), rf(&a, 4).unwrap());
            prop_assert!(afk >= 0.0 && rfk >= 0.0);
            prop_assert_eq!(afk == 0.0, rfk == 0.0);
            let min_peak = (0..3).map(|b| a[b][b]).fold(f64::INFINITY, f64::min);
            prop_assert!(rfk <= afk / min_peak + 1e-12);
        }

        #[test]
        fn stored_peak_is_non_decreasing((cells, joint) in matrix(4)) {
            let mut m = AccuracyMatrix::new();
            for k in 0..4 {
                let row = (0..=k).map(|b| Count::new(cells[k][b], 200)).collect();
                m.push_step(row, Count::new(joint[k], 500)).unwrap();
            }
            for b in 0..4 {
                for k in b + 1..4 {
                    prop_assert!(m.peak(k, b) >= m.peak(k - 1, b));
                }
            }
        }
    }
}
