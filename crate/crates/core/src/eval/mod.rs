//! Classification metrics, fold plans, significance tests and the experiment
//! matrix.

mod experiment;
mod stats;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::TrainError;

pub use experiment::{
    cross_validate, run_experiment, render_table, CvResult, ExperimentConfig, ExperimentReport,
    Setup, SetupResult,
};
pub use stats::{
    bonferroni, paired_ttest, significance, student_t_two_sided_p, PairComparison,
    SignificanceReport, TTest,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label vectors differ in length: {truth} truth vs {pred} predicted")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("need at least one label")]
    Empty,
    #[error("label {0} is not binary")]
    NotBinary(u8),
    #[error("cannot split {n} items into {k} folds")]
    TooFewItems { n: usize, k: usize },
    #[error("score lists must share one length >= 2")]
    BadScores,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Macro-averaged over both classes.
    pub precision: f64,
    /// Macro-averaged over both classes.
    pub recall: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl Metrics {
    /// Arithmetic mean of each field.
    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            accuracy: sum(|m| m.accuracy),
            macro_f1: sum(|m| m.macro_f1),
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Binary metrics with the 0/0 = 0 rule for undefined per-class values.
pub fn confusion_and_metrics(truth: &[u8], pred: &[u8]) -> Result<Metrics, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    // m[t][p]
    let mut m = [[0usize; 2]; 2];
    for (&t, &p) in truth.iter().zip(pred) {
        for v in [t, p] {
            if v > 1 {
                return Err(EvalError::NotBinary(v));
            }
        }
        m[t as usize][p as usize] += 1;
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for c in 0..2 {
        let tp = m[c][c];
        let precision = ratio(tp, m[0][c] + m[1][c]);
        let recall = ratio(tp, m[c][0] + m[c][1]);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    Ok(Metrics {
        precision: p_sum / 2.0,
        recall: r_sum / 2.0,
        accuracy: ratio(m[0][0] + m[1][1], truth.len()),
        macro_f1: f_sum / 2.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Seeded shuffle of `0..n`, then `k` contiguous test blocks; the first
/// `n % k` blocks are one larger.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 || n < k {
        return Err(EvalError::TooFewItems { n, k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test = idx[start..start + len].to_vec();
        let train = idx[..start].iter().chain(&idx[start + len..]).copied().collect();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(FoldPlan { k, seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 1, 0, 1];
        let m = confusion_and_metrics(&y, &y).unwrap();
        assert_eq!(m, Metrics { precision: 1.0, recall: 1.0, accuracy: 1.0, macro_f1: 1.0 });
    }

    #[test]
    fn all_one_class_on_balanced_truth() {
        let m = confusion_and_metrics(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // class 0: p = 1/2, r = 1, f1 = 2/3; class 1: 0/0 -> 0
        assert_eq!(m.macro_f1, (2.0 / 3.0) / 2.0);
        assert_eq!(m.precision, 0.25);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn single_correct_example() {
        let m = confusion_and_metrics(&[1], &[1]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(confusion_and_metrics(&[0], &[0, 1]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(confusion_and_metrics(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(confusion_and_metrics(&[2], &[0]), Err(EvalError::NotBinary(2))));
    }

    #[test]
    fn fold_sizes() {
        let sizes = |n| {
            kfold(n, 5, 1)
                .unwrap()
                .folds
                .iter()
                .map(|f| f.test.len())
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(100), vec![20; 5]);
        assert_eq!(sizes(483), vec![97, 97, 97, 96, 96]);
        assert_eq!(kfold(483, 5, 9).unwrap(), kfold(483, 5, 9).unwrap());
        assert!(kfold(4, 5, 0).is_err());
    }
}
