//! Deterministic synthetic scenes: a spatially smooth linear mixture of random
//! endmember spectra with a handful of implanted single-pixel anomalies.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{GroundTruth, HsiCube};
use crate::error::{Error, Result};

/// Standard deviation of the additive Gaussian sensor noise.
pub const NOISE_STD: f64 = 0.01;
const MAX_ANOMALY_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub endmember_count: usize,
    /// Fraction of pixels replaced by the anomaly spectrum, in `(0, 0.05]`.
    pub anomaly_rate: f64,
    /// Minimum spectral angle (radians) between the anomaly and every endmember.
    pub anomaly_contrast: f64,
    /// Box-filter radius used to smooth the abundance fields.
    pub smoothness: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 32,
            endmember_count: 4,
            anomaly_rate: 0.005,
            anomaly_contrast: 0.25,
            smoothness: 12,
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, bands: usize, anomaly_rate: f64, seed: u64) -> Self {
        Self {
            height,
            width,
            bands,
            anomaly_rate,
            seed,
            ..Self::default()
        }
    }

    pub fn anomaly_count(&self) -> usize {
        (self.anomaly_rate * (self.height * self.width) as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.endmember_count == 0 {
            return Err(Error::Config("endmember_count must be at least 1".into()));
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate <= 0.05) {
            return Err(Error::Config(format!(
                "anomaly_rate {} outside (0, 0.05]",
                self.anomaly_rate
            )));
        }
        if self.anomaly_rate * ((self.height * self.width) as f64) < 1.0 {
            return Err(Error::Config(
                "anomaly_rate * height * width must be at least 1".into(),
            ));
        }
        if !(self.anomaly_contrast >= 0.0 && self.anomaly_contrast < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config(format!(
                "anomaly_contrast {} outside [0, pi/2)",
                self.anomaly_contrast
            )));
        }
        Ok(())
    }
}

/// Smooth positive spectrum: an offset plus three Gaussian bumps.
fn random_spectrum(rng: &mut impl Rng, bands: usize) -> Vec<f64> {
    let base = rng.random_range(0.2..0.8);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.3),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = if bands > 1 {
                b as f64 / (bands - 1) as f64
            } else {
                0.5
            };
            let v = base
                + bumps
                    .iter()
                    .map(|&(amp, mu, sigma)| amp * (-(t - mu).powi(2) / (2.0 * sigma * sigma)).exp())
                    .sum::<f64>();
            v.clamp(0.01, 1.0)
        })
        .collect()
}

pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Separable box filter with clamped borders.
fn box_blur(field: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return field.to_vec();
    }
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r)
                .map(|d| field[y * w + clamp(x as isize + d, w)])
                .sum();
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r)
                .map(|d| tmp[clamp(y as isize + d, h) * w + x])
                .sum();
            out[y * w + x] = s / norm;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Generates the scene described by `spec`. Identical specs give bit-identical output.
pub fn synth_scene(spec: &SceneSpec) -> Result<(HsiCube, GroundTruth)> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.bands);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");

    let endmembers: Vec<Vec<f64>> = (0..spec.endmember_count)
        .map(|_| random_spectrum(&mut rng, c))
        .collect();

    // abundance logits: smoothed white noise, standardized, softmaxed across endmembers
    let logits: Vec<Vec<f64>> = endmembers
        .iter()
        .map(|_| {
            let white: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut f = box_blur(&box_blur(&white, h, w, spec.smoothness), h, w, spec.smoothness);
            standardize(&mut f);
            f
        })
        .collect();

    let mut data = vec![0.0; n * c];
    for p in 0..n {
        let z: Vec<f64> = logits.iter().map(|f| (2.0 * f[p]).exp()).collect();
        let total: f64 = z.iter().sum();
        for b in 0..c {
            let mix: f64 = z
                .iter()
                .zip(&endmembers)
                .map(|(a, e)| a / total * e[b])
                .sum();
            data[p * c + b] = mix + noise.sample(&mut rng);
        }
    }

    let mut anomaly = None;
    for _ in 0..MAX_ANOMALY_DRAWS {
        let candidate = random_spectrum(&mut rng, c);
        if endmembers
            .iter()
            .all(|e| spectral_angle(&candidate, e) > spec.anomaly_contrast)
        {
            anomaly = Some(candidate);
            break;
        }
    }
    let anomaly = anomaly.ok_or(Error::ContrastUnsatisfiable {
        contrast: spec.anomaly_contrast,
        attempts: MAX_ANOMALY_DRAWS,
    })?;

    let mut mask = vec![false; n];
    let mut picks = index::sample(&mut rng, n, spec.anomaly_count()).into_vec();
    picks.sort_unstable();
    for p in picks {
        mask[p] = true;
        for b in 0..c {
            data[p * c + b] = anomaly[b] + noise.sample(&mut rng);
        }
    }

    Ok((HsiCube::new(h, w, c, data)?, GroundTruth::new(h, w, mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anomaly_count_formula() {
        let spec = SceneSpec::new(64, 64, 32, 0.005, 1);
        assert_eq!(spec.anomaly_count(), 20);
        let (_, gt) = synth_scene(&spec).unwrap();
        assert_eq!(gt.anomaly_count(), 20);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec::new(16, 16, 8, 0.02, 7);
        assert_eq!(synth_scene(&spec).unwrap(), synth_scene(&spec).unwrap());
    }

    #[test]
    fn seeds_differ_but_counts_match() {
        let a = synth_scene(&SceneSpec::new(64, 64, 32, 0.005, 1)).unwrap();
        let b = synth_scene(&SceneSpec::new(64, 64, 32, 0.005, 2)).unwrap();
        assert_ne!(a.0.data(), b.0.data());
        assert_eq!(a.1.anomaly_count(), b.1.anomaly_count());
    }

    #[test]
    fn unsatisfiable_contrast_fails() {
        let spec = SceneSpec {
            anomaly_contrast: 1.5,
            ..SceneSpec::new(8, 8, 8, 0.05, 3)
        };
        assert!(matches!(
            synth_scene(&spec),
            Err(Error::ContrastUnsatisfiable { .. })
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SceneSpec::new(8, 8, 4, 0.0, 1).validate().is_err());
        assert!(SceneSpec::new(8, 8, 4, 0.06, 1).validate().is_err());
        // 0.01 * 64 < 1
        assert!(SceneSpec::new(8, 8, 4, 0.01, 1).validate().is_err());
    }
}
