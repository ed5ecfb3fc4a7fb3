//! Dense image containers: the spectral cube, the binary ground truth mask
//! and the per-pixel anomaly map.
//!
//! Cubes are stored pixel-interleaved in memory (`(row * width + col) * bands + band`);
//! the on-disk `.hsi` layout is band-sequential and is converted on load/save.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    /// Builds a cube from pixel-interleaved data.
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Dimensions(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(Error::Dimensions(format!(
                "cube {height}x{width}x{bands} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimensions(format!("non-finite value at element {i}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Result<Self> {
        Self::new(height, width, bands, vec![0.0; height * width * bands])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Pixel-interleaved values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Spectrum of the pixel with row-major index `p`.
    pub fn spectrum(&self, p: usize) -> &[f64] {
        &self.data[p * self.bands..(p + 1) * self.bands]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(row * self.width + col) * self.bands + band]
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Each band min-max mapped to `[0, 1]`; constant bands become zero.
    pub fn normalize_bands(&self) -> HsiCube {
        let c = self.bands;
        let mut lo = vec![f64::INFINITY; c];
        let mut hi = vec![f64::NEG_INFINITY; c];
        for px in self.data.chunks_exact(c) {
            for b in 0..c {
                lo[b] = lo[b].min(px[b]);
                hi[b] = hi[b].max(px[b]);
            }
        }
        let mut data = self.data.clone();
        for px in data.chunks_exact_mut(c) {
            for b in 0..c {
                let range = hi[b] - lo[b];
                px[b] = if range > 0.0 {
                    (px[b] - lo[b]) / range
                } else {
                    0.0
                };
            }
        }
        HsiCube { data, ..*self }
    }
}

/// Binary per-pixel labels, `true` marks an anomaly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl GroundTruth {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || mask.len() != height * width {
            return Err(Error::Dimensions(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                mask.len()
            )));
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn anomaly_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Non-negative per-pixel anomaly scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || scores.len() != height * width {
            return Err(Error::Dimensions(format!(
                "map {height}x{width} needs {} scores, got {}",
                height * width,
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Dimensions(format!(
                "score {} at pixel {i} is negative or non-finite",
                scores[i]
            )));
        }
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            scores: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}
