//! Online background pixel mining.
//!
//! Per-pixel reconstruction errors are shaped by `l(x) = e^(beta x)/beta + alpha x`,
//! whose gradient `e^(beta x) + alpha` grows with the error. Inside every
//! superpixel the sorted errors are cut at their largest first difference and
//! pixels above the cut contribute neither loss nor gradient.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::superpixel::SegmentLabels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObpmConfig {
    /// Minimum gradient.
    pub alpha: f64,
    /// Exponential rate.
    pub beta: f64,
}

impl Default for ObpmConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl ObpmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be > 0", self.beta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

pub fn obpm_pointwise(x: f64, cfg: &ObpmConfig) -> f64 {
    (cfg.beta * x).exp() / cfg.beta + cfg.alpha * x
}

/// Derivative of [`obpm_pointwise`].
pub fn obpm_gradient(x: f64, cfg: &ObpmConfig) -> f64 {
    (cfg.beta * x).exp() + cfg.alpha
}

/// [`obpm_pointwise`] applied elementwise on the graph.
pub fn obpm_pointwise_graph(g: &mut Graph, x: Var, cfg: &ObpmConfig) -> Result<Var> {
    let bx = g.scale(x, cfg.beta)?;
    let e = g.exp(bx)?;
    let e = g.scale(e, 1.0 / cfg.beta)?;
    let lin = g.scale(x, cfg.alpha)?;
    g.add(e, lin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCutoff {
    /// Errors of the segment, ascending.
    pub sorted: Vec<f64>,
    /// 1-based position of the largest first difference (0 for singletons).
    pub q: usize,
    /// Largest retained error.
    pub boundary: f64,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffReport {
    pub segments: Vec<SegmentCutoff>,
    /// Per-pixel retention flag.
    pub retained: Vec<bool>,
}

impl CutoffReport {
    pub fn retained_fraction(&self) -> f64 {
        self.retained.iter().filter(|&&r| r).count() as f64 / self.retained.len() as f64
    }

    /// `segment,q,boundary,retained` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,q,boundary,retained\n");
        for (i, s) in self.segments.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", s.q, s.boundary, s.retained));
        }
        out
    }
}

/// Largest-gap cutoff inside every segment. Ties between equal gaps go to the
/// larger index; a pixel is kept when its error is `<=` the boundary.
pub fn segment_cutoff(errors: &[f64], labels: &SegmentLabels) -> Result<CutoffReport> {
    if errors.len() != labels.labels().len() {
        return Err(Error::Dimensions(format!(
            "{} errors for {} labelled pixels",
            errors.len(),
            labels.labels().len()
        )));
    }
    let mut retained = vec![false; errors.len()];
    let segments = labels
        .members()
        .into_iter()
        .map(|members| {
            let mut sorted: Vec<f64> = members.iter().map(|&p| errors[p]).collect();
            sorted.sort_by(f64::total_cmp);
            let (q, boundary) = if sorted.len() < 2 {
                (0, sorted[0])
            } else {
                let mut best = (f64::NEG_INFINITY, 0);
                for j in 0..sorted.len() - 1 {
                    let gap = sorted[j + 1] - sorted[j];
                    if gap >= best.0 {
                        best = (gap, j);
                    }
                }
                (best.1 + 1, sorted[best.1])
            };
            let mut kept = 0;
            for &p in &members {
                if errors[p] <= boundary {
                    retained[p] = true;
                    kept += 1;
                }
            }
            SegmentCutoff {
                sorted,
                q,
                boundary,
                retained: kept,
            }
        })
        .collect();
    Ok(CutoffReport { segments, retained })
}

fn check_pair(g: &Graph, x_hat: Var, x: Var) -> Result<(usize, usize)> {
    match (g.shape(x_hat), g.shape(x)) {
        (&[n, c], &[n2, c2]) if n == n2 && c == c2 => Ok((n, c)),
        (a, b) => Err(Error::Shape {
            op: "loss",
            detail: format!("reconstruction {a:?} vs input {b:?}"),
        }),
    }
}

/// Residual `x_hat - x`.
fn residual(g: &mut Graph, x_hat: Var, x: Var) -> Result<Var> {
    let neg = g.scale(x, -1.0)?;
    g.add(x_hat, neg)
}

/// `|x_hat - x|` via a constant sign mask (sign(0) taken as +1).
fn abs_residual(g: &mut Graph, x_hat: Var, x: Var) -> Result<Var> {
    let r = residual(g, x_hat, x)?;
    let signs: Vec<f64> = g
        .value(r)
        .iter()
        .map(|v| if *v < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let shape = g.shape(r).to_vec();
    let s = g.constant(&shape, signs)?;
    g.mul(r, s)
}

/// Mean absolute error over bands, as a `pixels x 1` column.
pub fn pixel_errors(g: &mut Graph, x_hat: Var, x: Var) -> Result<Var> {
    let (_, c) = check_pair(g, x_hat, x)?;
    let abs = abs_residual(g, x_hat, x)?;
    let mean = g.constant(&[c, 1], vec![1.0 / c as f64; c])?;
    g.matmul(abs, mean)
}

/// OBPM loss over retained pixels, with the retention mask recomputed from
/// the current errors and applied as a constant.
pub fn obpm_loss(
    g: &mut Graph,
    x_hat: Var,
    x: Var,
    labels: &SegmentLabels,
    cfg: &ObpmConfig,
) -> Result<(Var, CutoffReport)> {
    cfg.validate()?;
    let errors = pixel_errors(g, x_hat, x)?;
    let report = segment_cutoff(g.value(errors), labels)?;
    let n = report.retained.len();
    let mask = g.constant(
        &[n, 1],
        report
            .retained
            .iter()
            .map(|&r| if r { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let pointwise = obpm_pointwise_graph(g, errors, cfg)?;
    let masked = g.mul(pointwise, mask)?;
    Ok((g.sum(masked)?, report))
}

/// Mean absolute error over all entries.
pub fn l1_loss(g: &mut Graph, x_hat: Var, x: Var) -> Result<Var> {
    let (n, c) = check_pair(g, x_hat, x)?;
    let abs = abs_residual(g, x_hat, x)?;
    let total = g.sum(abs)?;
    g.scale(total, 1.0 / (n * c) as f64)
}

/// Mean squared error over all entries.
pub fn l2_loss(g: &mut Graph, x_hat: Var, x: Var) -> Result<Var> {
    let (n, c) = check_pair(g, x_hat, x)?;
    let r = residual(g, x_hat, x)?;
    let sq = g.mul(r, r)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / (n * c) as f64)
}
