//! The guided reconstruction network.
//!
//! A forward pass pools the image over superpixels, runs a residual
//! single-head self-attention stack across the pooled spectra, broadcasts the
//! result back to pixels and multiplies it elementwise with an error-adaptive
//! convolution of the input. The adaptive convolution gathers, for every
//! pixel, the `k^2` positions of its `n x n` window with the lowest score in
//! the previous anomaly map and weights them with a single shared `k x k`
//! kernel.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{AnomalyMap, HsiCube};
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::superpixel::{pool, uppool_indices, SegmentLabels};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaConvConfig {
    /// Candidate window size `n` (odd).
    pub window: usize,
    /// Kernel size `k` (odd, `k <= n`).
    pub kernel: usize,
}

impl Default for AdaConvConfig {
    fn default() -> Self {
        Self {
            window: 9,
            kernel: 3,
        }
    }
}

impl AdaConvConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.window, self.kernel);
        if n == 0 || k == 0 || n % 2 == 0 || k % 2 == 0 || k > n {
            return Err(Error::Config(format!(
                "window {n} and kernel {k} must be odd, positive and kernel <= window"
            )));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

/// What the attention stack sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// Superpixel pooling / uppooling around cross-segment attention.
    Spp,
    /// No perturbation: each pixel is its own token and only attends to
    /// itself, which makes the stack a per-pixel residual autoencoder.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    /// `bands x dim`
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    /// `dim x bands`
    pub wo: Vec<f64>,
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub bands: usize,
    pub dim: usize,
    pub layers: Vec<AttentionLayer>,
    pub kernel_size: usize,
    /// `k x k`, row-major.
    pub kernel: Vec<f64>,
}

impl ModelParams {
    /// Xavier-uniform attention weights; the kernel starts as a `1/k^2` average.
    pub fn init(bands: usize, dim: usize, layers: usize, kernel_size: usize, seed: u64) -> Result<Self> {
        if bands == 0 || dim == 0 || layers == 0 {
            return Err(Error::Config("bands, dim and layers must be >= 1".into()));
        }
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {kernel_size} must be odd")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (bands + dim) as f64).sqrt();
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let layers = (0..layers)
            .map(|_| AttentionLayer {
                wq: draw(bands * dim),
                wk: draw(bands * dim),
                wv: draw(bands * dim),
                wo: draw(dim * bands),
            })
            .collect();
        let taps = kernel_size * kernel_size;
        Ok(Self {
            bands,
            dim,
            layers,
            kernel_size,
            kernel: vec![1.0 / taps as f64; taps],
        })
    }

    /// Parameter tensors in canonical order: per layer `wq, wk, wv, wo`, then the kernel.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::with_capacity(self.layers.len() * 4 + 1);
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo]);
        }
        out.push(&self.kernel);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::with_capacity(self.layers.len() * 4 + 1);
        for l in &mut self.layers {
            out.extend([&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo]);
        }
        out.push(&mut self.kernel);
        out
    }

    /// Shapes matching [`ModelParams::tensors`].
    pub fn shapes(&self) -> Vec<[usize; 2]> {
        let (c, d) = (self.bands, self.dim);
        let mut out = Vec::new();
        for _ in &self.layers {
            out.extend([[c, d], [c, d], [c, d], [d, c]]);
        }
        out.push([self.kernel_size * self.kernel_size, 1]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Graph handles for one binding of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<[Var; 4]>,
    pub kernel: Var,
}

impl ParamVars {
    /// Handles in the order of [`ModelParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flatten().copied().collect();
        out.push(self.kernel);
        out
    }
}

/// Puts `params` on `g`, as trainable leaves when `trainable`.
pub fn bind_params(g: &mut Graph, params: &ModelParams, trainable: bool) -> Result<ParamVars> {
    let mut vars = Vec::new();
    for (t, shape) in params.tensors().into_iter().zip(params.shapes()) {
        vars.push(if trainable {
            g.param(&shape, t.clone())?
        } else {
            g.constant(&shape, t.clone())?
        });
    }
    let kernel = vars.pop().expect("kernel");
    let layers = vars.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    Ok(ParamVars { layers, kernel })
}

/// Residual single-head attention over the rows of `v` (`m x bands`):
/// `V <- V + softmax(V Wq (V Wk)^T / sqrt(d)) (V Wv) Wo` per layer.
pub fn attention_stack(g: &mut Graph, v: Var, layers: &[[Var; 4]], dim: usize) -> Result<Var> {
    let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
    let mut v = v;
    for &[wq, wk, wv, wo] in layers {
        let q = g.matmul(v, wq)?;
        let k = g.matmul(v, wk)?;
        let val = g.matmul(v, wv)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, inv_sqrt_d)?;
        let attn = g.softmax_rows(logits)?;
        let mixed = g.matmul(attn, val)?;
        let out = g.matmul(mixed, wo)?;
        v = g.add(v, out)?;
    }
    Ok(v)
}

/// The per-token path used without perturbation: each token attends only to
/// itself, so a layer is `V <- V + (V Wv) Wo`.
pub fn self_only_stack(g: &mut Graph, v: Var, layers: &[[Var; 4]]) -> Result<Var> {
    let mut v = v;
    for &[_, _, wv, wo] in layers {
        let val = g.matmul(v, wv)?;
        let out = g.matmul(val, wo)?;
        v = g.add(v, out)?;
    }
    Ok(v)
}

/// The `n x n` window around `(row, col)` in row-major order, coordinates
/// clamped into the image (border replication), always `n^2` entries.
pub fn window_indices(row: usize, col: usize, n: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let r = (n / 2) as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut out = Vec::with_capacity(n * n);
    for dy in -r..=r {
        for dx in -r..=r {
            out.push((clamp(row as isize + dy, h), clamp(col as isize + dx, w)));
        }
    }
    out
}

/// The `k^2` window entries with the smallest scores (ties to the earlier
/// window position), returned in window order.
pub fn adaconv_select(
    scores: &[f64],
    width: usize,
    window: &[(usize, usize)],
    k: usize,
) -> Vec<(usize, usize)> {
    let taps = k * k;
    let mut order: Vec<usize> = (0..window.len()).collect();
    let score = |i: usize| scores[window[i].0 * width + window[i].1];
    order.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(taps).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| window[i]).collect()
}

/// Selected source pixel (row-major index) for every pixel and tap:
/// entry `p * k^2 + t`.
pub fn selection(map: &AnomalyMap, cfg: &AdaConvConfig) -> Vec<usize> {
    let (h, w) = (map.height(), map.width());
    let scores = map.scores();
    (0..h * w)
        .into_par_iter()
        .flat_map_iter(|p| {
            let win = window_indices(p / w, p % w, cfg.window, h, w);
            adaconv_select(scores, w, &win, cfg.kernel)
                .into_iter()
                .map(move |(r, c)| r * w + c)
        })
        .collect()
}

/// How many times each pixel is gathered across all windows.
pub fn utilization(selected: &[usize], pixels: usize) -> Vec<usize> {
    let mut counts = vec![0; pixels];
    for &s in selected {
        counts[s] += 1;
    }
    counts
}

/// Adaptive convolution on the graph. `features` is `pixels x bands`,
/// `kernel` is `k^2 x 1`; the output is `pixels x bands` with
/// `out[p, b] = sum_t features[selected[p, t], b] * kernel[t]`.
pub fn adaconv_graph(
    g: &mut Graph,
    features: Var,
    kernel: Var,
    selected: &[usize],
    taps: usize,
) -> Result<Var> {
    let (pixels, bands) = match *g.shape(features) {
        [p, b] => (p, b),
        ref s => {
            return Err(Error::Shape {
                op: "adaconv",
                detail: format!("features must be a matrix, got {s:?}"),
            })
        }
    };
    if selected.len() != pixels * taps || g.shape(kernel) != [taps, 1] {
        return Err(Error::Shape {
            op: "adaconv",
            detail: format!(
                "{} selections and kernel {:?} for {pixels} pixels x {taps} taps",
                selected.len(),
                g.shape(kernel)
            ),
        });
    }
    let mut idx = Vec::with_capacity(pixels * bands * taps);
    for p in 0..pixels {
        let sel = &selected[p * taps..(p + 1) * taps];
        for b in 0..bands {
            idx.extend(sel.iter().map(|&s| s * bands + b));
        }
    }
    let stacked = g.gather(features, Arc::new(idx), &[pixels * bands, taps])?;
    let conv = g.matmul(stacked, kernel)?;
    g.reshape(conv, &[pixels, bands])
}

/// Value-only adaptive convolution of `features` guided by `map`.
pub fn adaconv_apply(
    features: &HsiCube,
    map: &AnomalyMap,
    cfg: &AdaConvConfig,
    kernel: &[f64],
) -> Result<HsiCube> {
    cfg.validate()?;
    check_map(features, map)?;
    let taps = cfg.taps();
    if kernel.len() != taps {
        return Err(Error::Shape {
            op: "adaconv",
            detail: format!("kernel has {} entries, expected {taps}", kernel.len()),
        });
    }
    let (h, w, c) = (features.height(), features.width(), features.bands());
    let mut g = Graph::new();
    let f = g.constant(&[h * w, c], features.data().to_vec())?;
    let k = g.constant(&[taps, 1], kernel.to_vec())?;
    let out = adaconv_graph(&mut g, f, k, &selection(map, cfg), taps)?;
    HsiCube::new(h, w, c, g.value(out).to_vec())
}

fn check_map(cube: &HsiCube, map: &AnomalyMap) -> Result<()> {
    if cube.spatial_dims() != (map.height(), map.width()) {
        return Err(Error::Dimensions(format!(
            "cube is {}x{}, map is {}x{}",
            cube.height(),
            cube.width(),
            map.height(),
            map.width()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
/// Builds the reconstruction of `cube` on `g` and returns `(x, x_hat)`, with
/// `x` a constant `pixels x bands` leaf.
pub fn forward_graph(
    g: &mut Graph,
    cube: &HsiCube,
    guidance: &AnomalyMap,
    labels: &SegmentLabels,
    pv: &ParamVars,
    params: &ModelParams,
    cfg: &AdaConvConfig,
    perturbation: Perturbation,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    check_map(cube, guidance)?;
    if params.bands != cube.bands() {
        return Err(Error::Dimensions(format!(
            "model expects {} bands, cube has {}",
            params.bands,
            cube.bands()
        )));
    }
    if params.kernel_size != cfg.kernel {
        return Err(Error::Config(format!(
            "model kernel is {0}x{0}, config asks for {1}x{1}",
            params.kernel_size, cfg.kernel
        )));
    }
    let (n, c) = (cube.pixels(), cube.bands());
    let x = g.constant(&[n, c], cube.data().to_vec())?;

    let up = match perturbation {
        Perturbation::Spp => {
            if (labels.height(), labels.width()) != cube.spatial_dims() {
                return Err(Error::Dimensions("labels do not match the cube".into()));
            }
            let pooled = pool(cube, labels)?;
            let tokens = g.constant(&[pooled.count, c], pooled.values)?;
            let mixed = attention_stack(g, tokens, &pv.layers, params.dim)?;
            g.gather(mixed, Arc::new(uppool_indices(labels, c)), &[n, c])?
        }
        Perturbation::None => self_only_stack(g, x, &pv.layers)?,
    };

    let conv = adaconv_graph(g, x, pv.kernel, &selection(guidance, cfg), cfg.taps())?;
    let x_hat = g.mul(up, conv)?;
    Ok((x, x_hat))
}

/// One forward pass with SPP: `uppool(attention(pool(X))) * adaconv(X)`.
pub fn model_forward(
    cube: &HsiCube,
    guidance: &AnomalyMap,
    labels: &SegmentLabels,
    params: &ModelParams,
    cfg: &AdaConvConfig,
) -> Result<HsiCube> {
    forward_values(cube, guidance, labels, params, cfg, Perturbation::Spp)
}

pub fn forward_values(
    cube: &HsiCube,
    guidance: &AnomalyMap,
    labels: &SegmentLabels,
    params: &ModelParams,
    cfg: &AdaConvConfig,
    perturbation: Perturbation,
) -> Result<HsiCube> {
    let mut g = Graph::new();
    let pv = bind_params(&mut g, params, false)?;
    let (_, x_hat) = forward_graph(&mut g, cube, guidance, labels, &pv, params, cfg, perturbation)?;
    HsiCube::new(cube.height(), cube.width(), cube.bands(), g.value(x_hat).to_vec()).map_err(|_| {
        Error::Dimensions("reconstruction produced non-finite values".into())
    })
}

/// Per-pixel l2 norm of the reconstruction residual.
pub fn anomaly_score(x_hat: &HsiCube, x: &HsiCube) -> Result<AnomalyMap> {
    if (x_hat.height(), x_hat.width(), x_hat.bands()) != (x.height(), x.width(), x.bands()) {
        return Err(Error::Dimensions("reconstruction and input differ in shape".into()));
    }
    scores_from_values(x_hat.data(), x.data(), x.height(), x.width(), x.bands())
}

pub(crate) fn scores_from_values(
    x_hat: &[f64],
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
) -> Result<AnomalyMap> {
    let scores = x_hat
        .chunks_exact(c)
        .zip(x.chunks_exact(c))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    AnomalyMap::new(h, w, scores)
}
