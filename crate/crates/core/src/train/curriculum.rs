//! Length-bin curriculum with parameter inheritance.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_metric, train_from, TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::eval::better;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::derive_tagged;
use crate::trajgen::{Dataset, Sample, Split};

/// Inclusive trajectory-length range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LengthBin {
    pub lo: usize,
    pub hi: usize,
}

impl LengthBin {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid length bin [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, len: usize) -> bool {
        (self.lo..=self.hi).contains(&len)
    }

    /// Distance from `len` to the nearest edge; 0 inside.
    pub fn distance(&self, len: usize) -> usize {
        if len < self.lo {
            self.lo - len
        } else {
            len.saturating_sub(self.hi)
        }
    }
}

impl fmt::Display for LengthBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.lo, self.hi)
    }
}

/// The twelve curriculum bins.
pub fn curriculum_bins() -> Vec<LengthBin> {
    [
        (10, 20),
        (21, 30),
        (31, 40),
        (41, 50),
        (51, 100),
        (101, 200),
        (201, 300),
        (301, 400),
        (401, 500),
        (501, 600),
        (601, 800),
        (801, 1000),
    ]
    .into_iter()
    .map(|(lo, hi)| LengthBin { lo, hi })
    .collect()
}

#[derive(Debug, Clone)]
pub struct BinData {
    pub bin: LengthBin,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl BinData {
    /// Samples of `ds` whose length falls in `bin`. The dataset's training
    /// and validation splits are pooled and re-split by `val_fraction`
    /// (last ids go to validation).
    pub fn from_dataset(ds: &Dataset, bin: LengthBin, val_fraction: f64) -> Self {
        let keep = |v: Vec<Sample>| -> Vec<Sample> {
            v.into_iter().filter(|s| bin.contains(s.trajectory.len())).collect()
        };
        let mut pool = keep(ds.split(Split::Train));
        pool.extend(keep(ds.split(Split::Val)));
        pool.sort_by_key(|s| s.id);
        let n_val = ((pool.len() as f64) * val_fraction).round() as usize;
        let val = pool.split_off(pool.len() - n_val.min(pool.len()));
        Self {
            bin,
            train: pool,
            val,
            test: keep(ds.split(Split::Test)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumRun {
    pub round: usize,
    pub bin: LengthBin,
    pub initial_digest: String,
    pub final_digest: String,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct CurriculumResult {
    pub runs: Vec<CurriculumRun>,
    /// Final round models, in training (descending length) order.
    pub models: Vec<(LengthBin, ModelParams)>,
    /// `matrix[i][j]`: metric of model i on bin j's test set, both in
    /// training order.
    pub matrix: Vec<Vec<f64>>,
    /// For each bin j (training order), the index of the selected model.
    pub selection: Vec<usize>,
    pub higher_is_better: bool,
}

impl CurriculumResult {
    /// `(served bin, model bin)` pairs in ascending length order.
    pub fn routes(&self) -> Vec<(LengthBin, LengthBin)> {
        let mut r: Vec<_> = self
            .selection
            .iter()
            .enumerate()
            .map(|(j, &i)| (self.models[j].0, self.models[i].0))
            .collect();
        r.sort();
        r
    }

    pub fn selection_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,model_lo,model_hi,metric,native_metric\n");
        let mut rows: Vec<usize> = (0..self.selection.len()).collect();
        rows.sort_by_key(|&j| self.models[j].0);
        for j in rows {
            let i = self.selection[j];
            let (b, m) = (self.models[j].0, self.models[i].0);
            s.push_str(&format!(
                "{},{},{},{},{:.17e},{:.17e}\n",
                b.lo, b.hi, m.lo, m.hi, self.matrix[i][j], self.matrix[j][j]
            ));
        }
        s
    }

    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("model_lo,model_hi");
        for (b, _) in &self.models {
            s.push_str(&format!(",{}-{}", b.lo, b.hi));
        }
        s.push('\n');
        for (i, (m, _)) in self.models.iter().enumerate() {
            s.push_str(&format!("{},{}", m.lo, m.hi));
            for v in &self.matrix[i] {
                s.push_str(&format!(",{v:.17e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("round,bin_lo,bin_hi,initial_sha256,final_sha256,best_epoch,stop_epoch\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round, r.bin.lo, r.bin.hi, r.initial_digest, r.final_digest, r.history.best_epoch, r.history.stop_epoch
            ));
        }
        s
    }
}

/// Two rounds over the bins in descending-length order, each run starting
/// from the previous run's final parameters (fresh optimizer state). Every
/// round-two model is scored on every bin's test set and each bin keeps its
/// best model, ties going to the bin's own model.
pub fn curriculum_train(
    data: &[BinData],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<CurriculumResult> {
    if data.is_empty() {
        return Err(Error::Data("curriculum needs at least one bin".into()));
    }
    for d in data {
        if d.train.is_empty() || d.val.is_empty() || d.test.is_empty() {
            return Err(Error::Data(format!(
                "bin {} is missing data (train {}, val {}, test {})",
                d.bin,
                d.train.len(),
                d.val.len(),
                d.test.len()
            )));
        }
    }
    let mut order: Vec<&BinData> = data.iter().collect();
    order.sort_by(|a, b| b.bin.cmp(&a.bin));
    if order.windows(2).any(|w| w[0].bin == w[1].bin) {
        return Err(Error::Config("duplicate curriculum bin".into()));
    }
    let mut params = ModelParams::init(model_config, config.seed)?;
    let mut runs = Vec::new();
    let mut models = Vec::new();
    for round in 1..=2 {
        for (k, d) in order.iter().enumerate() {
            let initial_digest = params.digest();
            let seed = derive_tagged(config.seed, "curriculum", (round * 1000 + k) as u64);
            let (trained, history) = train_from(
                params,
                model_config,
                &d.train,
                &d.val,
                config,
                config.curriculum_patience.min(config.epochs),
                seed,
            )?;
            log::info!("curriculum round {round} bin {} stopped at epoch {}", d.bin, history.stop_epoch);
            runs.push(CurriculumRun {
                round,
                bin: d.bin,
                initial_digest,
                final_digest: trained.digest(),
                history,
            });
            if round == 2 {
                models.push((d.bin, trained.clone()));
            }
            params = trained;
        }
    }
    let n = order.len();
    let cells: Vec<Result<f64>> = (0..n * n)
        .into_par_iter()
        .map(|c| evaluate_metric(&models[c / n].1, model_config, &order[c % n].test))
        .collect();
    let mut matrix = vec![vec![0.0; n]; n];
    for (c, v) in cells.into_iter().enumerate() {
        matrix[c / n][c % n] = v?;
    }
    let task = model_config.task();
    let selection = (0..n)
        .map(|j| {
            let mut best = j;
            for i in 0..n {
                if better(task, matrix[i][j], matrix[best][j]) {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(CurriculumResult {
        runs,
        models,
        matrix,
        selection,
        higher_is_better: task == crate::model::Task::Model,
    })
}
