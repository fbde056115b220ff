use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{add_noise, generate, normalize, DiffusionModel, Trajectory, MIN_LENGTH};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, derive_tagged};

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Redraws allowed when a path comes out constant (e.g. a CTRW that never
/// jumps inside a short window).
const MAX_REDRAWS: u64 = 10_000;

const PREPROCESSING: &str =
    "noise added to the raw path, then positions shifted to start at 0 and scaled to unit RMS displacement";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    /// `holdout_train` of the data is kept for training, of which
    /// `inner_train` is used for fitting and the rest for validation.
    pub fn nested(holdout_train: f64, inner_train: f64) -> Self {
        Self {
            train: holdout_train * inner_train,
            val: holdout_train * (1.0 - inner_train),
            test: 1.0 - holdout_train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!("invalid split fractions {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self::nested(0.75, 0.9)
    }
}

/// Number of items in (train, val, test) for a dataset of `count` items.
pub fn split_counts(count: usize, split: &SplitFractions) -> (usize, usize, usize) {
    let train = ((count as f64) * split.train).round() as usize;
    let val = (((count as f64) * split.val).round() as usize).min(count - train.min(count));
    let train = train.min(count);
    (train, val, count - train - val)
}

/// α values in 0.05 steps over [0.05, 2).
pub fn default_alpha_grid() -> Vec<f64> {
    (1..40).map(|k| k as f64 / 20.0).collect()
}

/// Trajectory lengths of the evaluation grid.
pub fn evaluation_lengths() -> Vec<usize> {
    vec![10, 20, 30, 40, 50, 100, 200, 300, 400, 500, 600, 800, 1000]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub length_range: (usize, usize),
    pub models: Vec<DiffusionModel>,
    /// `None` selects [`default_alpha_grid`].
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
    /// Empty means noiseless trajectories.
    #[serde(default)]
    pub snr_values: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub balance: Balance,
}

/// How sample ids are spread over the (model, α) strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balance {
    /// Round-robin over all admissible strata.
    #[default]
    Strata,
    /// Round-robin over models first, then over each model's α values, so
    /// every model gets the same share.
    Models,
}

impl DatasetSpec {
    pub fn new(count: usize, length_range: (usize, usize), seed: u64) -> Self {
        Self {
            count,
            length_range,
            models: DiffusionModel::ALL.to_vec(),
            alpha_grid: None,
            snr_values: Vec::new(),
            seed,
            split: SplitFractions::default(),
            balance: Balance::Strata,
        }
    }

    pub fn alpha_grid(&self) -> Vec<f64> {
        self.alpha_grid.clone().unwrap_or_else(default_alpha_grid)
    }

    /// Stratum index of sample `id`.
    pub fn stratum_of(&self, id: usize, strata: &[(DiffusionModel, f64)]) -> usize {
        match self.balance {
            Balance::Strata => id % strata.len(),
            Balance::Models => {
                let mut models: Vec<DiffusionModel> = strata.iter().map(|s| s.0).collect();
                models.dedup();
                let m = models[id % models.len()];
                let first = strata.iter().position(|s| s.0 == m).unwrap_or(0);
                let n = strata.iter().filter(|s| s.0 == m).count();
                first + (id / models.len()) % n
            }
        }
    }

    /// The admissible (model, α) strata in model-code then α order.
    pub fn strata(&self) -> Vec<(DiffusionModel, f64)> {
        let grid = self.alpha_grid();
        let mut models = self.models.clone();
        models.sort();
        models.dedup();
        models
            .into_iter()
            .flat_map(|m| {
                grid.iter()
                    .copied()
                    .filter(move |&a| m.admits(a))
                    .map(move |a| (m, a))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be positive".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("empty model set".into()));
        }
        let (lo, hi) = self.length_range;
        if lo < MIN_LENGTH || hi < lo {
            return Err(Error::Config(format!(
                "length range [{lo}, {hi}] invalid (minimum length {MIN_LENGTH})"
            )));
        }
        if let Some(bad) = self.snr_values.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("snr values must be positive, got {bad}")));
        }
        self.split.validate()?;
        if self.strata().is_empty() {
            return Err(Error::Config(
                "alpha grid has no value admissible for the selected models".into(),
            ));
        }
        Ok(())
    }
}

/// The evaluation grid: every (model, length, SNR, α) combination with a
/// fixed number of trajectories per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub cell_size: usize,
    pub lengths: Vec<usize>,
    pub snr_values: Vec<f64>,
    pub models: Vec<DiffusionModel>,
    pub seed: u64,
}

impl GridSpec {
    /// Full grid with `cell_size` trajectories per cell (2000 at full scale).
    pub fn evaluation(cell_size: usize, seed: u64) -> Self {
        Self {
            cell_size,
            lengths: evaluation_lengths(),
            snr_values: vec![1.0, 2.0],
            models: DiffusionModel::ALL.to_vec(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub model: DiffusionModel,
    pub length: usize,
    /// `None` for a noiseless cell.
    pub snr: Option<f64>,
    pub alpha: f64,
}

pub fn grid_cells(spec: &GridSpec) -> Vec<GridCell> {
    let snrs: Vec<Option<f64>> = if spec.snr_values.is_empty() {
        vec![None]
    } else {
        spec.snr_values.iter().map(|&s| Some(s)).collect()
    };
    let mut cells = Vec::new();
    for &model in &spec.models {
        for &length in &spec.lengths {
            for &snr in &snrs {
                for alpha in model.grid_alphas() {
                    cells.push(GridCell {
                        model,
                        length,
                        snr,
                        alpha,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCount {
    pub model: DiffusionModel,
    pub alpha: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRange {
    pub cell: GridCell,
    pub first_id: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub preprocessing: String,
    #[serde(default)]
    pub spec: Option<DatasetSpec>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Size of the nominal (model × α grid) product before range filtering.
    pub nominal_strata: usize,
    pub strata: Vec<StratumCount>,
    pub total: usize,
    pub splits: SplitIds,
    #[serde(default)]
    pub cells: Vec<CellRange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples of one split, in id order of the manifest.
    pub fn split(&self, which: Split) -> Vec<Sample> {
        let ids = match which {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        };
        self.select(ids)
    }

    pub fn select(&self, ids: &[usize]) -> Vec<Sample> {
        // Ids are dense 0..n when produced by this module; fall back to a
        // search otherwise.
        ids.iter()
            .filter_map(|&id| match self.samples.get(id) {
                Some(s) if s.id == id => Some(s.clone()),
                _ => self.samples.iter().find(|s| s.id == id).cloned(),
            })
            .collect()
    }
}

/// One labelled, noised, standardised trajectory. Constant paths are redrawn
/// with a derived seed.
fn labelled_sample(
    model: DiffusionModel,
    alpha: f64,
    length: usize,
    snr: Option<f64>,
    seed: u64,
) -> Result<Trajectory> {
    for attempt in 0..MAX_REDRAWS {
        let gen_seed = derive_tagged(seed, "path", attempt);
        let raw = generate(model, alpha, length, gen_seed)?;
        if raw.displacement_scale()? == 0.0 {
            continue;
        }
        let noisy = match snr {
            Some(s) => add_noise(&raw, s, derive_tagged(seed, "noise", attempt))?,
            None => raw,
        };
        let mut t = normalize(&noisy)?;
        t.seed = seed;
        return Ok(t);
    }
    Err(Error::Degenerate(format!(
        "{model} alpha={alpha} length={length}: {MAX_REDRAWS} constant draws in a row"
    )))
}

fn assign_splits(count: usize, split: &SplitFractions, seed: u64) -> SplitIds {
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut rng::seeded(derive_tagged(seed, "split", 0)));
    let (n_train, n_val, _) = split_counts(count, split);
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    SplitIds { train, val, test }
}

/// Generates a dataset in memory. Samples are assigned round-robin to the
/// (model, α) strata; lengths are uniform over the length range.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let strata = spec.strata();
    let (lo, hi) = spec.length_range;
    let samples: Vec<Sample> = (0..spec.count)
        .into_par_iter()
        .map(|id| {
            let seed = derive_seed(spec.seed, id as u64);
            let (model, alpha) = strata[spec.stratum_of(id, &strata)];
            let mut pick = rng::seeded(derive_tagged(seed, "shape", 0));
            let length = pick.gen_range(lo..=hi);
            let snr = if spec.snr_values.is_empty() {
                None
            } else {
                Some(spec.snr_values[pick.gen_range(0..spec.snr_values.len())])
            };
            let trajectory = labelled_sample(model, alpha, length, snr, seed)?;
            Ok(Sample { id, trajectory })
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; strata.len()];
    for id in 0..spec.count {
        counts[spec.stratum_of(id, &strata)] += 1;
    }
    let strata_counts = strata
        .iter()
        .zip(counts)
        .map(|(&(model, alpha), count)| StratumCount { model, alpha, count })
        .collect();
    let manifest = DatasetManifest {
        format_version: 1,
        seed: spec.seed,
        preprocessing: PREPROCESSING.into(),
        spec: Some(spec.clone()),
        grid: None,
        nominal_strata: spec.models.len() * spec.alpha_grid().len(),
        strata: strata_counts,
        total: spec.count,
        splits: assign_splits(spec.count, &spec.split, spec.seed),
        cells: Vec::new(),
    };
    Ok(Dataset { manifest, samples })
}

/// Generates a dataset and writes it under `out`.
pub fn build_dataset(spec: &DatasetSpec, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(spec)?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

/// Generates the evaluation grid and writes it under `out`. All samples are
/// placed in the test split.
pub fn build_grid(spec: &GridSpec, out: Option<&Path>) -> Result<Dataset> {
    if spec.cell_size == 0 {
        return Err(Error::Config("grid cell size must be positive".into()));
    }
    if spec.models.is_empty() || spec.lengths.is_empty() {
        return Err(Error::Config("grid needs at least one model and length".into()));
    }
    if let Some(&l) = spec.lengths.iter().find(|&&l| l < MIN_LENGTH) {
        return Err(Error::Config(format!("grid length {l} below {MIN_LENGTH}")));
    }
    let cells = grid_cells(spec);
    let per = spec.cell_size;
    let samples: Vec<Sample> = (0..cells.len() * per)
        .into_par_iter()
        .map(|id| {
            let cell = cells[id / per];
            let seed = derive_seed(spec.seed, id as u64);
            let trajectory = labelled_sample(cell.model, cell.alpha, cell.length, cell.snr, seed)?;
            Ok(Sample { id, trajectory })
        })
        .collect::<Result<_>>()?;
    let mut strata: Vec<StratumCount> = Vec::new();
    for cell in &cells {
        match strata
            .iter_mut()
            .find(|s| s.model == cell.model && s.alpha == cell.alpha)
        {
            Some(s) => s.count += per,
            None => strata.push(StratumCount {
                model: cell.model,
                alpha: cell.alpha,
                count: per,
            }),
        }
    }
    let total = samples.len();
    let manifest = DatasetManifest {
        format_version: 1,
        seed: spec.seed,
        preprocessing: PREPROCESSING.into(),
        spec: None,
        grid: Some(spec.clone()),
        nominal_strata: strata.len(),
        strata,
        total,
        splits: SplitIds {
            test: (0..total).collect(),
            ..Default::default()
        },
        cells: cells
            .iter()
            .enumerate()
            .map(|(k, &cell)| CellRange {
                cell,
                first_id: k * per,
                count: per,
            })
            .collect(),
    };
    let ds = Dataset { manifest, samples };
    if let Some(dir) = out {
        write_dataset(&ds, dir)?;
    }
    Ok(ds)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_trajectory_line(w: &mut impl Write, id: usize, positions: &[f64]) -> std::io::Result<()> {
    write!(w, "{id},{}", positions.len())?;
    for p in positions {
        write!(w, ",{p:.16e}")?;
    }
    writeln!(w)
}

/// Writes `trajectories.csv`, `labels.csv` and `manifest.json` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let traj_path = dir.join(TRAJECTORIES_FILE);
    let label_path = dir.join(LABELS_FILE);
    let mut tw = create(&traj_path)?;
    let mut lw = create(&label_path)?;
    for s in &ds.samples {
        let t = &s.trajectory;
        write_trajectory_line(&mut tw, s.id, &t.positions).map_err(|e| Error::io(&traj_path, e))?;
        let snr = t.snr.map(|v| v.to_string()).unwrap_or_default();
        writeln!(lw, "{},{},{},{}", s.id, t.model.code(), t.alpha, snr)
            .map_err(|e| Error::io(&label_path, e))?;
    }
    tw.flush().map_err(|e| Error::io(&traj_path, e))?;
    lw.flush().map_err(|e| Error::io(&label_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&ds.manifest)
        .map_err(|e| Error::Data(format!("manifest serialisation: {e}")))?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))
}

/// Parses one `id,L,p_0,...,p_{L-1}` line.
pub fn parse_trajectory_line(line: &str) -> std::result::Result<(usize, Vec<f64>), String> {
    let mut fields = line.trim().split(',');
    let id = fields
        .next()
        .filter(|s| !s.is_empty())
        .ok_or("missing id")?
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("bad id: {e}"))?;
    let len = fields
        .next()
        .ok_or("missing length")?
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("bad length: {e}"))?;
    let positions = fields
        .map(|f| f.trim().parse::<f64>().map_err(|e| format!("bad position '{f}': {e}")))
        .collect::<std::result::Result<Vec<f64>, String>>()?;
    if positions.len() != len {
        return Err(format!(
            "declared length {len} but found {} positions",
            positions.len()
        ));
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err("non-finite position".into());
    }
    Ok((id, positions))
}

fn parse_label_line(line: &str) -> std::result::Result<(usize, DiffusionModel, f64, Option<f64>), String> {
    let f: Vec<&str> = line.trim().split(',').collect();
    if f.len() != 4 {
        return Err(format!("expected 4 fields, found {}", f.len()));
    }
    let id = f[0].parse::<usize>().map_err(|e| format!("bad id: {e}"))?;
    let code = f[1].parse::<usize>().map_err(|e| format!("bad model code: {e}"))?;
    let model = DiffusionModel::from_code(code).map_err(|e| e.to_string())?;
    let alpha = f[2].parse::<f64>().map_err(|e| format!("bad alpha: {e}"))?;
    let snr = if f[3].is_empty() {
        None
    } else {
        Some(f[3].parse::<f64>().map_err(|e| format!("bad snr: {e}"))?)
    };
    Ok((id, model, alpha, snr))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    let traj_path = dir.join(TRAJECTORIES_FILE);
    let label_path = dir.join(LABELS_FILE);
    let traj_lines = read_lines(&traj_path)?;
    let label_lines = read_lines(&label_path)?;
    if traj_lines.len() != label_lines.len() {
        return Err(Error::Data(format!(
            "{} trajectories but {} labels",
            traj_lines.len(),
            label_lines.len()
        )));
    }
    let mut samples = Vec::with_capacity(traj_lines.len());
    for (k, (tl, ll)) in traj_lines.iter().zip(&label_lines).enumerate() {
        let (id, positions) = parse_trajectory_line(tl).map_err(|detail| Error::Parse {
            path: traj_path.clone(),
            line: k + 1,
            detail,
        })?;
        let (lid, model, alpha, snr) = parse_label_line(ll).map_err(|detail| Error::Parse {
            path: label_path.clone(),
            line: k + 1,
            detail,
        })?;
        if lid != id {
            return Err(Error::Parse {
                path: label_path.clone(),
                line: k + 1,
                detail: format!("label id {lid} does not match trajectory id {id}"),
            });
        }
        samples.push(Sample {
            id,
            trajectory: Trajectory {
                positions,
                model,
                alpha,
                snr,
                seed: derive_seed(manifest.seed, id as u64),
            },
        });
    }
    Ok(Dataset { manifest, samples })
}
