//! Global Reed-Xiaoli detector: squared Mahalanobis distance of every pixel
//! to the image-wide mean and (ridged) covariance.

use rayon::prelude::*;

use crate::cube::{AnomalyMap, HsiCube};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundStats {
    pub mean: Vec<f64>,
    /// `bands x bands`, row-major, ridge already on the diagonal.
    pub covariance: Vec<f64>,
    pub ridge: f64,
    /// Lower Cholesky factor of `covariance`.
    chol: Vec<f64>,
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s.is_nan() || s <= 0.0 {
                    return Err(Error::NotPositiveDefinite { pivot: i });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Unbiased sample mean and covariance of the pixel spectra (two passes).
fn moments(cube: &HsiCube) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (cube.pixels(), cube.bands());
    let mut mean = vec![0.0; c];
    for p in 0..n {
        for (m, v) in mean.iter_mut().zip(cube.spectrum(p)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; c * c];
    let mut centered = vec![0.0; c];
    for p in 0..n {
        for ((d, v), m) in centered.iter_mut().zip(cube.spectrum(p)).zip(&mean) {
            *d = v - m;
        }
        for i in 0..c {
            for j in 0..=i {
                cov[i * c + j] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..c {
        for j in 0..=i {
            let v = cov[i * c + j] / denom;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    (mean, cov)
}

/// `1e-6 * trace(Σ) / bands`, floored at `1e-12`.
pub fn default_ridge(cube: &HsiCube) -> f64 {
    let (_, cov) = moments(cube);
    let c = cube.bands();
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    (1e-6 * trace / c as f64).max(1e-12)
}

pub fn fit_stats(cube: &HsiCube, ridge: f64) -> Result<BackgroundStats> {
    if cube.pixels() < 2 {
        return Err(Error::Dimensions("RX statistics need at least two pixels".into()));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("ridge {ridge} must be finite and >= 0")));
    }
    let c = cube.bands();
    let (mean, mut covariance) = moments(cube);
    for i in 0..c {
        covariance[i * c + i] += ridge;
    }
    let chol = cholesky(&covariance, c)?;
    Ok(BackgroundStats {
        mean,
        covariance,
        ridge,
        chol,
    })
}

impl BackgroundStats {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// `(x - μ)ᵀ Σ⁻¹ (x - μ)` through a forward substitution with the factor.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let c = self.bands();
        let mut y = vec![0.0; c];
        for i in 0..c {
            let mut s = x[i] - self.mean[i];
            for (l, yk) in self.chol[i * c..i * c + i].iter().zip(&y[..i]) {
                s -= l * yk;
            }
            y[i] = s / self.chol[i * c + i];
        }
        y.iter().map(|v| v * v).sum()
    }
}

pub fn rxd_detect(cube: &HsiCube, stats: &BackgroundStats) -> Result<AnomalyMap> {
    if cube.bands() != stats.bands() {
        return Err(Error::Dimensions(format!(
            "statistics have {} bands, cube has {}",
            stats.bands(),
            cube.bands()
        )));
    }
    let scores = (0..cube.pixels())
        .into_par_iter()
        .map(|p| stats.mahalanobis_sq(cube.spectrum(p)).max(0.0))
        .collect();
    AnomalyMap::new(cube.height(), cube.width(), scores)
}

/// Fits with the default ridge and scores the cube.
pub fn rxd(cube: &HsiCube) -> Result<AnomalyMap> {
    rxd_detect(cube, &fit_stats(cube, default_ridge(cube))?)
}
