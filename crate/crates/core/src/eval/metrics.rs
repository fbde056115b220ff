//! Scalar metrics.

use crate::error::{Error, Result};
use crate::model::{class_probabilities, Task};
use crate::trajgen::Sample;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Data("no predictions to score".into()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(preds: &[f64], trues: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), trues.len())?;
    let sum: f64 = preds.iter().zip(trues).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / preds.len() as f64)
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= 5) {
        Some(l) => Err(Error::Domain(format!("class label {l} outside 0..4"))),
        None => Ok(()),
    }
}

/// 5×5 counts; entry (i, j) counts true class i predicted as j.
pub fn confusion_matrix(preds: &[usize], trues: &[usize]) -> Result<[[u64; 5]; 5]> {
    check_lengths(preds.len(), trues.len())?;
    check_labels(preds)?;
    check_labels(trues)?;
    let mut m = [[0u64; 5]; 5];
    for (&p, &t) in preds.iter().zip(trues) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Micro-averaged F1 from a confusion matrix: TP / (TP + (FP + FN) / 2),
/// summed over classes.
pub fn micro_f1_from_confusion(m: &[[u64; 5]; 5]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for c in 0..5 {
        tp += m[c][c];
        fp += (0..5).filter(|&r| r != c).map(|r| m[r][c]).sum::<u64>();
        fn_ += (0..5).filter(|&p| p != c).map(|p| m[c][p]).sum::<u64>();
    }
    tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64)
}

/// Micro-averaged F1, accumulated per class in one pass.
pub fn micro_f1(preds: &[usize], trues: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), trues.len())?;
    check_labels(preds)?;
    check_labels(trues)?;
    let mut tp = [0u64; 5];
    let mut fp = [0u64; 5];
    let mut fn_ = [0u64; 5];
    for (&p, &t) in preds.iter().zip(trues) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let tp: u64 = tp.iter().sum();
    let errs: u64 = fp.iter().sum::<u64>() + fn_.iter().sum::<u64>();
    Ok(tp as f64 / (tp as f64 + 0.5 * errs as f64))
}

/// Task label of a sample: α for regression, model code for classification.
pub fn target(task: Task, s: &Sample) -> f64 {
    match task {
        Task::Alpha => s.trajectory.alpha,
        Task::Model => s.trajectory.model.code() as f64,
    }
}

/// Turns one raw output row into a point prediction (α or class code).
pub fn point_prediction(task: Task, row: &[f64]) -> f64 {
    match task {
        Task::Alpha => row[0],
        Task::Model => class_probabilities(row).0.code() as f64,
    }
}

/// MAE for regression, micro-F1 for classification.
pub fn task_metric(task: Task, preds: &[f64], trues: &[f64]) -> Result<f64> {
    match task {
        Task::Alpha => mae(preds, trues),
        Task::Model => {
            let p: Vec<usize> = preds.iter().map(|&v| v as usize).collect();
            let t: Vec<usize> = trues.iter().map(|&v| v as usize).collect();
            micro_f1(&p, &t)
        }
    }
}

/// Whether `a` is a strictly better score than `b` for this task.
pub fn better(task: Task, a: f64, b: f64) -> bool {
    match task {
        Task::Alpha => a < b,
        Task::Model => a > b,
    }
}
