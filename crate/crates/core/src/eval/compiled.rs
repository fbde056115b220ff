//! A set of checkpoints routed by trajectory length.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, predict_raw, Checkpoint, Task};
use crate::train::LengthBin;
use crate::trajgen::normalize_positions;

/// Routing table of a checkpoint directory.
pub const ROUTES_FILE: &str = "compiled.csv";
/// Checkpoint of a single (unbinned) run.
pub const SINGLE_CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, Clone)]
pub struct CompiledModel {
    /// Sorted by bin; bins do not overlap.
    routes: Vec<(LengthBin, usize)>,
    checkpoints: Vec<Checkpoint>,
}

impl CompiledModel {
    /// One checkpoint serving every length.
    pub fn single(ckpt: Checkpoint) -> Self {
        Self {
            routes: vec![(LengthBin { lo: 1, hi: usize::MAX }, 0)],
            checkpoints: vec![ckpt],
        }
    }

    /// `routes` maps each served bin to an index into `checkpoints`.
    pub fn new(mut routes: Vec<(LengthBin, usize)>, checkpoints: Vec<Checkpoint>) -> Result<Self> {
        if routes.is_empty() || checkpoints.is_empty() {
            return Err(Error::Config("compiled model needs at least one route".into()));
        }
        routes.sort();
        if routes.windows(2).any(|w| w[0].0.hi >= w[1].0.lo) {
            return Err(Error::Config("overlapping length bins".into()));
        }
        if routes.iter().any(|r| r.1 >= checkpoints.len()) {
            return Err(Error::Config("route points at a missing checkpoint".into()));
        }
        let task = checkpoints[0].config.task();
        if checkpoints.iter().any(|c| c.config.task() != task) {
            return Err(Error::Config("checkpoints mix tasks".into()));
        }
        Ok(Self { routes, checkpoints })
    }

    /// Reads `compiled.csv` (`lo,hi,checkpoint`) if present, otherwise the
    /// single `model.ckpt`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let table = dir.join(ROUTES_FILE);
        if !table.exists() {
            return Ok(Self::single(load_checkpoint(&dir.join(SINGLE_CHECKPOINT))?));
        }
        let text = std::fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?;
        let mut files: Vec<String> = Vec::new();
        let mut routes = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |detail: &str| Error::Parse {
                path: table.clone(),
                line: i + 1,
                detail: detail.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(parse_err("expected lo,hi,checkpoint"));
            }
            let lo = f[0].trim().parse().map_err(|_| parse_err("bad lo"))?;
            let hi = f[1].trim().parse().map_err(|_| parse_err("bad hi"))?;
            let name = f[2].trim().to_string();
            let idx = match files.iter().position(|n| *n == name) {
                Some(k) => k,
                None => {
                    files.push(name);
                    files.len() - 1
                }
            };
            routes.push((LengthBin::new(lo, hi)?, idx));
        }
        let checkpoints = files
            .iter()
            .map(|f| load_checkpoint(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(routes, checkpoints)
    }

    pub fn task(&self) -> Task {
        self.checkpoints[0].config.task()
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    /// Index of the checkpoint serving `len`: the bin containing it, else
    /// the nearest bin.
    pub fn route(&self, len: usize) -> usize {
        let mut best = &self.routes[0];
        for r in &self.routes {
            if r.0.distance(len) < best.0.distance(len) {
                best = r;
            }
        }
        best.1
    }

    /// Raw output rows for standardized copies of `seqs`, in input order.
    pub fn predict(&self, seqs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let standardized = seqs
            .iter()
            .map(|s| normalize_positions(s))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![Vec::new(); seqs.len()];
        for (k, ckpt) in self.checkpoints.iter().enumerate() {
            let idx: Vec<usize> = (0..seqs.len()).filter(|&i| self.route(seqs[i].len()) == k).collect();
            if idx.is_empty() {
                continue;
            }
            let group: Vec<&[f64]> = idx.iter().map(|&i| standardized[i].as_slice()).collect();
            let rows = predict_raw(&ckpt.params, &ckpt.config, &group, 256)?;
            for (i, r) in idx.into_iter().zip(rows) {
                out[i] = r;
            }
        }
        Ok(out)
    }
}
