//! Training: optimizer, early stopping, learning-rate scaling, k-fold
//! validation and the length-bin curriculum.

mod curriculum;
mod optim;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{point_prediction, target, task_metric};
use crate::model::{batch_tensor, forward_graph, predict_raw, ModelConfig, ModelParams, Task};
use crate::rng::{derive_seed, derive_tagged, seeded};
use crate::tensor::Graph;
use crate::trajgen::Sample;

pub use curriculum::{
    curriculum_bins, curriculum_train, BinData, CurriculumResult, CurriculumRun, LengthBin,
};
pub use optim::{
    fit_with_early_stopping, optimizer_step, Adam, EarlyStopping, OptimizerKind, OptimizerState, StopDecision,
    TrainHistory,
};

/// Samples per independent gradient sub-graph. Gradients of the sub-graphs
/// are summed in a fixed order, so results do not depend on thread count.
const GRAD_CHUNK: usize = 8;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub heads: usize,
    pub cnn_dropout: f64,
    pub trans_dropout: f64,
    pub learn_rate: f64,
    pub epochs: usize,
    /// Single runs.
    pub patience: usize,
    /// Each curriculum run.
    pub curriculum_patience: usize,
    pub seed: u64,
    pub task: Task,
    pub optimizer: OptimizerKind,
    /// Validation share of each curriculum bin's training portion.
    pub curriculum_val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            heads: 16,
            cnn_dropout: 0.05,
            trans_dropout: 0.0,
            learn_rate: 2.133e-4,
            epochs: 100,
            patience: 10,
            curriculum_patience: 5,
            seed: 0,
            task: Task::Alpha,
            optimizer: OptimizerKind::Adam,
            curriculum_val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.patience == 0 || self.patience > self.epochs || self.curriculum_patience == 0 {
            return Err(Error::Config(format!(
                "patience must lie in 1..=epochs (patience {}, epochs {})",
                self.patience, self.epochs
            )));
        }
        if !(self.learn_rate > 0.0 && self.learn_rate.is_finite()) {
            return Err(Error::Config(format!("learn_rate {} must be positive", self.learn_rate)));
        }
        if !(0.0..1.0).contains(&self.curriculum_val_fraction) {
            return Err(Error::Config("curriculum_val_fraction must lie in [0, 1)".into()));
        }
        self.model_config().validate()
    }

    /// Model config with this run's heads, dropouts and task head.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            heads: self.heads,
            cnn_dropout: self.cnn_dropout,
            trans_dropout: self.trans_dropout,
            head_out: self.task.head_out(),
            ..ModelConfig::default()
        }
    }
}

/// Learning rate keeping the noise scale ε·N/B constant when moving from
/// (`base_n`, `base_b`) to (`new_n`, `new_b`).
pub fn scale_lr(base_lr: f64, base_n: usize, base_b: usize, new_n: usize, new_b: usize) -> Result<f64> {
    if !(base_lr > 0.0 && base_lr.is_finite()) {
        return Err(Error::Domain(format!("learning rate {base_lr} must be positive")));
    }
    if base_n == 0 || base_b == 0 || new_n == 0 || new_b == 0 {
        return Err(Error::Domain("training sizes and batch sizes must be positive".into()));
    }
    // Reduce the integer ratio (N·B')/(B·N') first so that identity and pure
    // rescalings round exactly once.
    let num = base_n as u128 * new_b as u128;
    let den = base_b as u128 * new_n as u128;
    let d = gcd(num, den);
    Ok(base_lr * (num / d) as f64 / (den / d) as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Noise scale g = ε·N/B.
pub fn noise_scale(lr: f64, n: usize, b: usize) -> f64 {
    lr * n as f64 / b as f64
}

/// Batches of equal-length samples: shuffled within each length group,
/// chunked, then the batch order itself shuffled.
pub fn equal_length_batches(samples: &[Sample], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seeded(seed);
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.trajectory.len()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Mean loss of one batch and its gradient for every parameter tensor.
pub fn batch_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[&Sample],
    seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let task = config.task();
    let n = batch.len();
    let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let seqs: Vec<&[f64]> = chunk.iter().map(|s| s.trajectory.positions.as_slice()).collect();
            let x = g.constant(batch_tensor(&seqs)?);
            let out = forward_graph(&mut g, &vars, config, x, true, derive_seed(seed, ci as u64))?;
            let loss = match task {
                Task::Alpha => {
                    let t: Vec<f64> = chunk.iter().map(|s| s.trajectory.alpha).collect();
                    g.l1_loss(out, &t)?
                }
                Task::Model => {
                    let l: Vec<usize> = chunk.iter().map(|s| s.trajectory.model.code()).collect();
                    g.cross_entropy(out, &l)?
                }
            };
            g.backward(loss)?;
            let w = chunk.len() as f64 / n as f64;
            let lv = g.value(loss).data()[0] * w;
            let grads = vars
                .0
                .iter()
                .zip(params.entries())
                .map(|(v, (_, t))| {
                    let mut gr = g.take_grad(*v).unwrap_or_else(|| vec![0.0; t.numel()]);
                    gr.iter_mut().for_each(|x| *x *= w);
                    gr
                })
                .collect();
            Ok((lv, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f64>>> = None;
    for part in parts {
        let (l, grads) = part?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// Evaluation-mode mean loss over a sample set.
pub fn mean_loss(params: &ModelParams, config: &ModelConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let seqs: Vec<&[f64]> = samples.iter().map(|s| s.trajectory.positions.as_slice()).collect();
    let rows = predict_raw(params, config, &seqs, EVAL_BATCH)?;
    let total: f64 = rows
        .iter()
        .zip(samples)
        .map(|(row, s)| match config.task() {
            Task::Alpha => (row[0] - s.trajectory.alpha).abs(),
            Task::Model => {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[s.trajectory.model.code()]
            }
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Task metric (MAE or micro-F1) of a model on a sample set.
pub fn evaluate_metric(params: &ModelParams, config: &ModelConfig, samples: &[Sample]) -> Result<f64> {
    let seqs: Vec<&[f64]> = samples.iter().map(|s| s.trajectory.positions.as_slice()).collect();
    let rows = predict_raw(params, config, &seqs, EVAL_BATCH)?;
    let task = config.task();
    let preds: Vec<f64> = rows.iter().map(|r| point_prediction(task, r)).collect();
    let trues: Vec<f64> = samples.iter().map(|s| target(task, s)).collect();
    task_metric(task, &preds, &trues)
}

fn check_sets(train: &[Sample], val: &[Sample]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty sets (train {}, validation {})",
            train.len(),
            val.len()
        )));
    }
    let ids: std::collections::HashSet<usize> = train.iter().map(|s| s.id).collect();
    if val.iter().any(|s| ids.contains(&s.id)) {
        return Err(Error::Data("training and validation sets share ids".into()));
    }
    Ok(())
}

/// Trains from `initial` with a fresh optimizer. Returns the parameters of
/// the best validation epoch.
pub fn train_from(
    initial: ModelParams,
    model_config: &ModelConfig,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    patience: usize,
    run_seed: u64,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    model_config.validate()?;
    check_sets(train, val)?;
    let sizes: Vec<usize> = initial.entries().iter().map(|(_, t)| t.numel()).collect();
    let mut state = (initial, OptimizerState::new(config.optimizer, &sizes));
    let (best, hist) = fit_with_early_stopping(config.epochs, patience, &mut state, |(params, opt), epoch| {
        let epoch_seed = derive_tagged(run_seed, "epoch", epoch as u64);
        let batches = equal_length_batches(train, config.batch_size, epoch_seed);
        let mut train_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let members: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(params, model_config, &members, derive_seed(epoch_seed, bi as u64))
                .map_err(|e| diagnose(e, epoch, bi))?;
            if !loss.is_finite() {
                return Err(Error::numeric("training", format!("epoch {epoch} batch {bi}: loss {loss}")));
            }
            train_loss += loss * members.len() as f64;
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut slices: Vec<&mut [f64]> = params.tensors_mut().map(|t| t.data_mut()).collect();
            optimizer_step(&mut slices, &grad_refs, opt, config.learn_rate).map_err(|e| diagnose(e, epoch, bi))?;
            params.tensors_mut().for_each(|t| t.round_to_f32());
        }
        let val_loss = mean_loss(params, model_config, val)?;
        log::debug!("epoch {epoch}: train {:.5} val {val_loss:.5}", train_loss / train.len() as f64);
        Ok((train_loss / train.len() as f64, val_loss))
    })?;
    Ok((best.0, hist))
}

fn diagnose(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric { location, detail } => Error::Numeric {
            location,
            detail: format!("{detail} (epoch {epoch}, batch {batch})"),
        },
        other => other,
    }
}

/// Single training run from a fresh initialization seeded by `config.seed`.
pub fn train_once(
    model_config: &ModelConfig,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let init = ModelParams::init(model_config, config.seed)?;
    train_from(init, model_config, train, val, config, config.patience, config.seed)
}

/// Deterministic fold assignment: ids sorted, shuffled with `seed`, then cut
/// into `k` contiguous folds whose sizes differ by at most one.
pub fn kfold_partition(ids: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Data(format!("{} items cannot fill {k} folds", ids.len())));
    }
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.shuffle(&mut seeded(derive_tagged(seed, "kfold", 0)));
    let n = order.len();
    Ok((0..k).map(|i| order[i * n / k..(i + 1) * n / k].to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KFoldReport {
    pub task: Task,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

impl KFoldReport {
    pub fn from_scores(task: Task, per_fold: Vec<f64>) -> Self {
        let n = per_fold.len() as f64;
        let mean = per_fold.iter().sum::<f64>() / n;
        let var = if per_fold.len() > 1 {
            per_fold.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            task,
            per_fold,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,metric\n");
        for (i, m) in self.per_fold.iter().enumerate() {
            s.push_str(&format!("{},{:.17e}\n", i + 1, m));
        }
        s.push_str(&format!("mean,{:.17e}\nstd,{:.17e}\n", self.mean, self.std));
        s
    }
}

/// k-fold driver: fold i is the test set; the rest is split 80/20 into
/// training and validation and handed to `fit_and_score`.
pub fn kfold_with<F>(samples: &[Sample], k: usize, seed: u64, task: Task, mut fit_and_score: F) -> Result<KFoldReport>
where
    F: FnMut(usize, &[Sample], &[Sample], &[Sample]) -> Result<f64>,
{
    let ids: Vec<usize> = samples.iter().map(|s| s.id).collect();
    let folds = kfold_partition(&ids, k, seed)?;
    let by_id: std::collections::HashMap<usize, &Sample> = samples.iter().map(|s| (s.id, s)).collect();
    let pick = |ids: &[usize]| ids.iter().map(|i| by_id[i].clone()).collect::<Vec<_>>();
    let mut scores = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        let rest: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let cut = rest.len() * 4 / 5;
        let (tr, va) = rest.split_at(cut.max(1).min(rest.len() - 1));
        scores.push(fit_and_score(i, &pick(tr), &pick(va), &pick(fold))?);
    }
    Ok(KFoldReport::from_scores(task, scores))
}

/// k-fold validation of `train_once`; the per-fold metric is MAE or
/// micro-F1 on the held-out fold.
pub fn kfold_validate(
    samples: &[Sample],
    k: usize,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<KFoldReport> {
    kfold_with(samples, k, config.seed, model_config.task(), |fold, tr, va, te| {
        let cfg = TrainConfig {
            seed: derive_tagged(config.seed, "fold", fold as u64),
            ..config.clone()
        };
        let (params, _) = train_once(model_config, tr, va, &cfg)?;
        evaluate_metric(&params, model_config, te)
    })
}

#[cfg(test)]
mod tests;
