use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{DiffusionModel, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Dispatches to the generator for `model`.
pub fn generate(model: DiffusionModel, alpha: f64, length: usize, seed: u64) -> Result<Trajectory> {
    match model {
        DiffusionModel::Attm => generate_attm(alpha, length, seed),
        DiffusionModel::Ctrw => generate_ctrw(alpha, length, seed),
        DiffusionModel::Fbm => generate_fbm(alpha, length, seed),
        DiffusionModel::Lw => generate_lw(alpha, length, seed),
        DiffusionModel::Sbm => generate_sbm(alpha, length, seed),
    }
}

fn check_length(length: usize) -> Result<()> {
    if length < 2 {
        return Err(Error::TooShort { length, minimum: 2 });
    }
    Ok(())
}

fn trajectory(positions: Vec<f64>, model: DiffusionModel, alpha: f64, seed: u64) -> Trajectory {
    Trajectory {
        positions,
        model,
        alpha,
        snr: None,
        seed,
    }
}

/// Uniform in (0, 1], safe to raise to negative powers.
fn open_uniform(rng: &mut Rng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Pareto sample with density ∝ t^{-1-index} on [1, ∞).
fn pareto_unit(rng: &mut Rng, index: f64) -> f64 {
    open_uniform(rng).powf(-1.0 / index)
}

/// Autocovariance of unit-variance fractional Gaussian noise at lag `k`.
pub(crate) fn fgn_autocovariance(hurst: f64, k: usize) -> f64 {
    let h2 = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

enum FbmMethod {
    /// sqrt(λ_k / m) for the circulant embedding of size m = 2n.
    Circulant {
        scales: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
    /// Lower-triangular Cholesky factor of the n×n increment covariance,
    /// stored row-major.
    Cholesky { factor: Vec<f64> },
}

/// Exact fractional Brownian motion sampler for a fixed (α, length).
///
/// Uses circulant embedding (Davies–Harte) and falls back to a Cholesky
/// factorisation if the embedding has a negative eigenvalue.
pub struct FbmGenerator {
    alpha: f64,
    length: usize,
    method: FbmMethod,
}

impl FbmGenerator {
    pub fn new(alpha: f64, length: usize) -> Result<Self> {
        DiffusionModel::Fbm.check_alpha(alpha)?;
        check_length(length)?;
        let hurst = alpha / 2.0;
        let n = length - 1;
        let m = 2 * n;
        let mut row: Vec<Complex64> = (0..m)
            .map(|j| {
                let lag = if j <= n { j } else { m - j };
                Complex64::new(fgn_autocovariance(hurst, lag), 0.0)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(m);
        fft.process(&mut row);
        let min_eig = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        let tol = 1e-10 * row[0].re.abs().max(1.0);
        let method = if min_eig >= -tol {
            let scales = row
                .iter()
                .map(|c| (c.re.max(0.0) / m as f64).sqrt())
                .collect();
            FbmMethod::Circulant { scales, fft }
        } else {
            FbmMethod::Cholesky {
                factor: cholesky_toeplitz(hurst, n)?,
            }
        };
        Ok(Self {
            alpha,
            length,
            method,
        })
    }

    pub fn uses_circulant(&self) -> bool {
        matches!(self.method, FbmMethod::Circulant { .. })
    }

    /// Draws the n = length − 1 increments.
    pub fn increments(&self, rng: &mut Rng) -> Vec<f64> {
        let n = self.length - 1;
        match &self.method {
            FbmMethod::Circulant { scales, fft } => {
                let mut buf: Vec<Complex64> = scales
                    .iter()
                    .map(|&s| {
                        let re: f64 = StandardNormal.sample(rng);
                        let im: f64 = StandardNormal.sample(rng);
                        Complex64::new(s * re, s * im)
                    })
                    .collect();
                fft.process(&mut buf);
                buf[..n].iter().map(|c| c.re).collect()
            }
            FbmMethod::Cholesky { factor } => {
                let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                (0..n)
                    .map(|i| {
                        let row = &factor[i * n..i * n + i + 1];
                        row.iter().zip(&z).map(|(a, b)| a * b).sum()
                    })
                    .collect()
            }
        }
    }

    pub fn sample(&self, seed: u64) -> Trajectory {
        let mut rng = rng::seeded(seed);
        let inc = self.increments(&mut rng);
        let mut positions = Vec::with_capacity(self.length);
        let mut x = 0.0;
        positions.push(x);
        for d in inc {
            x += d;
            positions.push(x);
        }
        trajectory(positions, DiffusionModel::Fbm, self.alpha, seed)
    }
}

fn cholesky_toeplitz(hurst: f64, n: usize) -> Result<Vec<f64>> {
    let gamma: Vec<f64> = (0..n).map(|k| fgn_autocovariance(hurst, k)).collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = gamma[i - j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::numeric(
                        "generate_fbm",
                        "increment covariance is not positive definite",
                    ));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Fractional Brownian motion with Hurst exponent H = α/2.
pub fn generate_fbm(alpha: f64, length: usize, seed: u64) -> Result<Trajectory> {
    Ok(FbmGenerator::new(alpha, length)?.sample(seed))
}

/// Continuous-time random walk: Pareto waiting times with tail index α and
/// unit cutoff, standard Gaussian jumps, observed on the integer grid.
///
/// At α = 1 the walk is the normal-diffusion limit and waits are exponential
/// with unit mean.
pub fn generate_ctrw(alpha: f64, length: usize, seed: u64) -> Result<Trajectory> {
    DiffusionModel::Ctrw.check_alpha(alpha)?;
    check_length(length)?;
    let mut rng = rng::seeded(seed);
    let wait = |rng: &mut Rng| {
        if alpha == 1.0 {
            -open_uniform(rng).ln()
        } else {
            pareto_unit(rng, alpha)
        }
    };
    let horizon = (length - 1) as f64;
    let mut positions = Vec::with_capacity(length);
    let mut x = 0.0;
    let mut next_jump = wait(&mut rng);
    for step in 0..length {
        let t = step as f64;
        while next_jump <= t {
            let dx: f64 = StandardNormal.sample(&mut rng);
            x += dx;
            next_jump += wait(&mut rng);
        }
        positions.push(x);
        if next_jump > horizon && step + 1 < length {
            positions.resize(length, x);
            break;
        }
    }
    Ok(trajectory(positions, DiffusionModel::Ctrw, alpha, seed))
}

/// Lévy walk: unit-speed flights with Pareto durations of tail index
/// σ = 3 − α and random direction, positions interpolated linearly.
///
/// At α = 1 (σ = 2, the normal-diffusion boundary) flight durations are
/// exponential with unit mean.
pub fn generate_lw(alpha: f64, length: usize, seed: u64) -> Result<Trajectory> {
    DiffusionModel::Lw.check_alpha(alpha)?;
    check_length(length)?;
    let sigma = 3.0 - alpha;
    let duration = |rng: &mut Rng| {
        if alpha == 1.0 {
            -open_uniform(rng).ln()
        } else {
            pareto_unit(rng, sigma)
        }
    };
    let mut rng = rng::seeded(seed);
    let mut positions = Vec::with_capacity(length);
    let mut flight_start = 0.0;
    let mut flight_origin = 0.0;
    let mut flight_end = duration(&mut rng);
    let mut direction = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    for step in 0..length {
        let t = step as f64;
        while flight_end < t {
            flight_origin += direction * (flight_end - flight_start);
            flight_start = flight_end;
            flight_end += duration(&mut rng);
            direction = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        positions.push(flight_origin + direction * (t - flight_start));
    }
    Ok(trajectory(positions, DiffusionModel::Lw, alpha, seed))
}

/// Shape exponent σ of the ATTM diffusivity law for a given α.
///
/// Sub-diffusion with MSD ∝ t^{σ/γ} requires σ < γ < σ + 1; with γ = σ/α the
/// choice σ = α / (2(1 − α)) puts γ = σ + ½ in the middle of that window.
pub fn attm_sigma(alpha: f64) -> f64 {
    alpha / (2.0 * (1.0 - alpha))
}

/// Annealed transient time motion: Brownian motion whose diffusivity D is
/// redrawn from P(D) ∝ D^{σ−1} on (0, 1] after regimes of duration
/// D^{−σ/α}. α = 1 degenerates to a single Brownian regime with D = 1.
pub fn generate_attm(alpha: f64, length: usize, seed: u64) -> Result<Trajectory> {
    DiffusionModel::Attm.check_alpha(alpha)?;
    check_length(length)?;
    let mut rng = rng::seeded(seed);
    let single_regime = alpha == 1.0;
    let sigma = if single_regime { 1.0 } else { attm_sigma(alpha) };
    let gamma = sigma / alpha;
    let draw_regime = |rng: &mut Rng| {
        if single_regime {
            return (1.0, f64::INFINITY);
        }
        let d = open_uniform(rng).powf(1.0 / sigma);
        (d, d.powf(-gamma))
    };
    let mut positions = Vec::with_capacity(length);
    let mut x = 0.0;
    positions.push(x);
    let (mut diffusivity, duration) = draw_regime(&mut rng);
    let mut regime_end = duration;
    for step in 1..length {
        let (t0, t1) = ((step - 1) as f64, step as f64);
        // Integrated diffusivity over [t0, t1], split across regime changes.
        let mut var = 0.0;
        let mut cursor = t0;
        while regime_end < t1 {
            var += 2.0 * diffusivity * (regime_end - cursor);
            cursor = regime_end;
            let (d, tau) = draw_regime(&mut rng);
            diffusivity = d;
            regime_end += tau;
        }
        var += 2.0 * diffusivity * (t1 - cursor);
        let z: f64 = StandardNormal.sample(&mut rng);
        x += var.sqrt() * z;
        positions.push(x);
    }
    Ok(trajectory(positions, DiffusionModel::Attm, alpha, seed))
}

/// Scaled Brownian motion: independent Gaussian increments whose variance
/// n^α − (n−1)^α makes the ensemble MSD exactly t^α.
pub fn generate_sbm(alpha: f64, length: usize, seed: u64) -> Result<Trajectory> {
    DiffusionModel::Sbm.check_alpha(alpha)?;
    check_length(length)?;
    let mut rng = rng::seeded(seed);
    let mut positions = Vec::with_capacity(length);
    let mut x = 0.0;
    positions.push(x);
    for step in 1..length {
        let n = step as f64;
        let var = n.powf(alpha) - (n - 1.0).powf(alpha);
        let z: f64 = StandardNormal.sample(&mut rng);
        x += var.sqrt() * z;
        positions.push(x);
    }
    Ok(trajectory(positions, DiffusionModel::Sbm, alpha, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_reject_out_of_range_alpha() {
        assert!(matches!(generate_fbm(0.0, 10, 1), Err(Error::Domain(_))));
        assert!(matches!(generate_fbm(2.0, 10, 1), Err(Error::Domain(_))));
        assert!(matches!(generate_ctrw(1.1, 10, 1), Err(Error::Domain(_))));
        assert!(matches!(generate_ctrw(0.0, 10, 1), Err(Error::Domain(_))));
        assert!(matches!(generate_lw(0.9, 10, 1), Err(Error::Domain(_))));
        assert!(matches!(generate_lw(2.0, 10, 1), Err(Error::Domain(_))));
        assert!(matches!(generate_attm(1.2, 10, 1), Err(Error::Domain(_))));
        assert!(matches!(generate_sbm(2.5, 10, 1), Err(Error::Domain(_))));
        let msg = generate_ctrw(1.5, 10, 1).unwrap_err().to_string();
        assert!(msg.contains("(0, 1]"), "{msg}");
    }

    #[test]
    fn short_lengths_from_the_test_grid() {
        let cases = [
            (DiffusionModel::Fbm, 1.9),
            (DiffusionModel::Ctrw, 0.1),
            (DiffusionModel::Lw, 1.0),
            (DiffusionModel::Attm, 0.1),
            (DiffusionModel::Sbm, 0.1),
        ];
        for (model, alpha) in cases {
            let t = generate(model, alpha, 10, 5).unwrap();
            assert_eq!(t.len(), 10);
            assert_eq!(t.model, model);
            assert_eq!(t.positions[0], 0.0);
            assert!(t.positions.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        for model in DiffusionModel::ALL {
            let alpha = model.grid_alphas()[3];
            let a = generate(model, alpha, 200, 99).unwrap();
            let b = generate(model, alpha, 200, 99).unwrap();
            assert_eq!(a, b);
            let c = generate(model, alpha, 200, 100).unwrap();
            assert_ne!(a.positions, c.positions);
        }
    }

    #[test]
    fn ctrw_is_piecewise_constant() {
        let t = generate_ctrw(0.1, 10, 3).unwrap();
        let moves = t.positions.windows(2).filter(|w| w[0] != w[1]).count();
        // Heavy-tailed waits with α = 0.1 leave most steps unchanged.
        assert!(moves < 9);
        let long = generate_ctrw(0.5, 1000, 4).unwrap();
        let moves = long.positions.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(moves < 999);
    }

    #[test]
    fn lw_moves_at_unit_speed() {
        let t = generate_lw(1.5, 500, 8).unwrap();
        for w in t.positions.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn fbm_embedding_is_valid_over_the_alpha_grid() {
        for k in 1..40 {
            let alpha = k as f64 * 0.05;
            let g = FbmGenerator::new(alpha, 1000).unwrap();
            assert!(g.uses_circulant(), "alpha {alpha}");
        }
    }

    #[test]
    fn cholesky_fallback_matches_covariance() {
        let l = cholesky_toeplitz(0.3, 6).unwrap();
        for i in 0..6 {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| l[i * 6 + k] * l[j * 6 + k]).sum();
                assert!((s - fgn_autocovariance(0.3, i - j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fbm_at_half_hurst_has_unit_increments() {
        let g = FbmGenerator::new(1.0, 1000).unwrap();
        let mut rng = rng::seeded(1);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0.0;
        for _ in 0..50 {
            for d in g.increments(&mut rng) {
                sum += d;
                sq += d * d;
                count += 1.0;
            }
        }
        let var = sq / count - (sum / count).powi(2);
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn sbm_increment_variance_is_constant_at_alpha_one() {
        let paths = 10_000;
        let len = 100;
        let mut early = 0.0;
        let mut late = 0.0;
        for p in 0..paths {
            let t = generate_sbm(1.0, len, p).unwrap();
            early += (t.positions[1] - t.positions[0]).powi(2);
            late += (t.positions[len - 1] - t.positions[len - 2]).powi(2);
        }
        let (early, late) = (early / paths as f64, late / paths as f64);
        assert!((early - 1.0).abs() < 0.05 && (late - 1.0).abs() < 0.05);
    }
}
