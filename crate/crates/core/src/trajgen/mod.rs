//! Labelled 1-D trajectories from the five anomalous-diffusion models,
//! localisation noise, standardisation and dataset files.

mod dataset;
mod generators;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use dataset::{
    build_dataset, build_grid, default_alpha_grid, generate_dataset, grid_cells,
    parse_trajectory_line, read_dataset, split_counts, evaluation_lengths, write_dataset,
    write_trajectory_line, Balance, CellRange, Dataset, DatasetManifest, DatasetSpec, GridCell, GridSpec,
    Sample, Split, SplitFractions, SplitIds, StratumCount, LABELS_FILE, MANIFEST_FILE,
    TRAJECTORIES_FILE,
};
pub use generators::{
    attm_sigma, generate, generate_attm, generate_ctrw, generate_fbm, generate_lw, generate_sbm,
    FbmGenerator,
};

/// Shortest trajectory the model accepts.
pub const MIN_LENGTH: usize = 10;

/// The five diffusion models. Integer codes are stable and used in label
/// files and the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DiffusionModel {
    Attm = 0,
    Ctrw = 1,
    Fbm = 2,
    Lw = 3,
    Sbm = 4,
}

impl DiffusionModel {
    pub const ALL: [DiffusionModel; 5] = [
        DiffusionModel::Attm,
        DiffusionModel::Ctrw,
        DiffusionModel::Fbm,
        DiffusionModel::Lw,
        DiffusionModel::Sbm,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::Domain(format!("model code {code} outside 0..=4")))
    }

    pub fn name(self) -> &'static str {
        match self {
            DiffusionModel::Attm => "ATTM",
            DiffusionModel::Ctrw => "CTRW",
            DiffusionModel::Fbm => "FBM",
            DiffusionModel::Lw => "LW",
            DiffusionModel::Sbm => "SBM",
        }
    }

    /// Whether `alpha` lies in this model's admissible range.
    pub fn admits(self, alpha: f64) -> bool {
        if !alpha.is_finite() {
            return false;
        }
        match self {
            DiffusionModel::Attm | DiffusionModel::Ctrw => alpha > 0.0 && alpha <= 1.0,
            DiffusionModel::Fbm | DiffusionModel::Sbm => alpha > 0.0 && alpha < 2.0,
            DiffusionModel::Lw => (1.0..2.0).contains(&alpha),
        }
    }

    pub fn range_label(self) -> &'static str {
        match self {
            DiffusionModel::Attm | DiffusionModel::Ctrw => "(0, 1]",
            DiffusionModel::Fbm | DiffusionModel::Sbm => "(0, 2)",
            DiffusionModel::Lw => "[1, 2)",
        }
    }

    pub fn check_alpha(self, alpha: f64) -> Result<()> {
        if self.admits(alpha) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "alpha {alpha} outside admissible interval {} for {}",
                self.range_label(),
                self.name()
            )))
        }
    }

    /// The α values tested for this model on the evaluation grid
    /// (0.1 steps over the model's range).
    pub fn grid_alphas(self) -> Vec<f64> {
        let (lo, hi) = match self {
            DiffusionModel::Attm | DiffusionModel::Ctrw => (1, 10),
            DiffusionModel::Fbm | DiffusionModel::Sbm => (1, 19),
            DiffusionModel::Lw => (10, 19),
        };
        (lo..=hi).map(|k| k as f64 / 10.0).collect()
    }
}

impl fmt::Display for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiffusionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        if let Ok(code) = up.parse::<usize>() {
            return Self::from_code(code);
        }
        Self::ALL
            .into_iter()
            .find(|m| m.name() == up)
            .ok_or_else(|| Error::Config(format!("unknown diffusion model '{s}'")))
    }
}

/// A 1-D trajectory with its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<f64>,
    pub model: DiffusionModel,
    pub alpha: f64,
    /// `None` for noiseless paths.
    pub snr: Option<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Root-mean-square of consecutive displacements. This is the
    /// displacement scale used both for SNR and for standardisation.
    pub fn displacement_scale(&self) -> Result<f64> {
        displacement_scale(&self.positions)
    }
}

pub fn displacement_scale(positions: &[f64]) -> Result<f64> {
    if positions.len() < 2 {
        return Err(Error::TooShort {
            length: positions.len(),
            minimum: 2,
        });
    }
    let n = (positions.len() - 1) as f64;
    let ss: f64 = positions.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    let scale = (ss / n).sqrt();
    if !scale.is_finite() {
        return Err(Error::numeric("displacement_scale", "non-finite positions"));
    }
    Ok(scale)
}

/// Adds i.i.d. Gaussian localisation noise with standard deviation
/// `σ_disp / snr`. An infinite `snr` means no noise and returns the path
/// unchanged.
pub fn add_noise(traj: &Trajectory, snr: f64, seed: u64) -> Result<Trajectory> {
    if snr.is_nan() || snr <= 0.0 {
        return Err(Error::Domain(format!("snr must be positive, got {snr}")));
    }
    if snr.is_infinite() {
        return Ok(traj.clone());
    }
    let scale = traj.displacement_scale()?;
    if scale == 0.0 {
        return Err(Error::Degenerate(
            "zero displacement scale, cannot set noise level".into(),
        ));
    }
    let sigma = scale / snr;
    let mut rng = rng::seeded(seed);
    let positions = traj
        .positions
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x + sigma * z
        })
        .collect();
    Ok(Trajectory {
        positions,
        snr: Some(snr),
        ..traj.clone()
    })
}

/// Shifts the path to start at zero and rescales it to unit displacement
/// scale.
pub fn normalize(traj: &Trajectory) -> Result<Trajectory> {
    let positions = normalize_positions(&traj.positions)?;
    Ok(Trajectory {
        positions,
        ..traj.clone()
    })
}

pub fn normalize_positions(positions: &[f64]) -> Result<Vec<f64>> {
    let scale = displacement_scale(positions)?;
    if scale == 0.0 {
        return Err(Error::Degenerate("constant path".into()));
    }
    let origin = positions[0];
    // Already-standardised paths (up to rounding of the scale) are returned
    // bit-for-bit.
    if origin == 0.0 && (scale - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(positions.to_vec());
    }
    Ok(positions.iter().map(|&x| (x - origin) / scale).collect())
}
