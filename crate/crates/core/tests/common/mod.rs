//! Independent statistical oracles shared by the integration tests.

#![allow(dead_code)]

use rayon::prelude::*;

/// Ensemble MSD ⟨(x(t) − x(0))²⟩ for t = 0..length over `paths` paths.
pub fn ensemble_msd<F>(paths: u64, length: usize, path: F) -> Vec<f64>
where
    F: Fn(u64) -> Vec<f64> + Sync,
{
    let sum = (0..paths)
        .into_par_iter()
        .fold(
            || vec![0.0; length],
            |mut acc, i| {
                let x = path(i);
                assert_eq!(x.len(), length);
                for (a, xi) in acc.iter_mut().zip(&x) {
                    *a += (xi - x[0]).powi(2);
                }
                acc
            },
        )
        .reduce(
            || vec![0.0; length],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    sum.into_iter().map(|s| s / paths as f64).collect()
}

/// Least-squares slope of log MSD against log t over `points` log-spaced
/// lags in [t_min, t_max].
pub fn loglog_slope(msd: &[f64], t_min: usize, t_max: usize, points: usize) -> f64 {
    let mut lags: Vec<usize> = (0..points)
        .map(|k| {
            let f = k as f64 / (points - 1) as f64;
            ((t_min as f64).ln() + f * ((t_max as f64).ln() - (t_min as f64).ln()))
                .exp()
                .round() as usize
        })
        .collect();
    lags.dedup();
    let xs: Vec<f64> = lags.iter().map(|&t| (t as f64).ln()).collect();
    let ys: Vec<f64> = lags.iter().map(|&t| msd[t].ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Fitting window used by every generator-fidelity check: the final decade
/// of lags of a length-1000 path.
pub const FIT_MIN_LAG: usize = 100;
pub const FIT_MAX_LAG: usize = 999;
pub const FIT_POINTS: usize = 30;

pub fn msd_exponent<F>(paths: u64, length: usize, path: F) -> f64
where
    F: Fn(u64) -> Vec<f64> + Sync,
{
    let msd = ensemble_msd(paths, length, path);
    loglog_slope(&msd, FIT_MIN_LAG, FIT_MAX_LAG.min(length - 1), FIT_POINTS)
}

/// Closed-form autocovariance of unit-variance fractional Gaussian noise,
/// written out independently of the generator.
pub fn fgn_gamma(hurst: f64, k: i64) -> f64 {
    let h2 = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).abs().powf(h2) - 2.0 * k.abs().powf(h2) + (k - 1.0).abs().powf(h2))
}

/// Central finite-difference gradient of a scalar function.
pub fn numeric_grad<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// max |a − n| / max(1e-3, |a|, |n|) over entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
