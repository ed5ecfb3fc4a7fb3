//! Detection metrics: ROC / AUC, threshold-swept detection and false-alarm
//! areas, SNPR and per-class score quantiles.
//!
//! Scores are min-max normalised to `[0, 1]` before any threshold sweep (a
//! constant map normalises to all zeros). A pixel is declared anomalous at
//! threshold `tau` iff its normalised score is `>= tau`.

use serde::{Serialize, Serializer};

use crate::cube::{AnomalyMap, GroundTruth};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Descending. The leading `+inf` threshold, when present, marks the origin.
    pub thresholds: Vec<f64>,
    pub pd: Vec<f64>,
    pub pf: Vec<f64>,
}

impl RocCurve {
    /// `tau,pd,pf` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,pd,pf\n");
        for i in 0..self.thresholds.len() {
            out.push_str(&format!("{},{},{}\n", self.thresholds[i], self.pd[i], self.pf[i]));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Separability {
    pub anomaly: Quantiles,
    pub background: Quantiles,
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub a_pd_tau: f64,
    pub a_pf_tau: f64,
    /// `+inf` when no background pixel survives any positive threshold.
    #[serde(serialize_with = "finite_or_inf")]
    pub snpr_db: f64,
    pub separability: Separability,
}

/// Splits normalised scores into (anomaly, background) after checking the pair.
fn split_normalized(map: &AnomalyMap, gt: &GroundTruth) -> Result<(Vec<f64>, Vec<f64>)> {
    if (map.height(), map.width()) != (gt.height(), gt.width()) {
        return Err(Error::Dimensions(format!(
            "map is {}x{}, ground truth is {}x{}",
            map.height(),
            map.width(),
            gt.height(),
            gt.width()
        )));
    }
    let positives = gt.anomaly_count();
    if positives == 0 || positives == gt.mask().len() {
        return Err(Error::SingleClass);
    }
    let s = map.scores();
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut anomaly = Vec::with_capacity(positives);
    let mut background = Vec::with_capacity(s.len() - positives);
    for (&v, &m) in s.iter().zip(gt.mask()) {
        let n = if range > 0.0 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        if m {
            anomaly.push(n);
        } else {
            background.push(n);
        }
    }
    Ok((anomaly, background))
}

/// Descending threshold grid `{1} ∪ unique scores ∪ {0}`.
fn threshold_grid(anomaly: &[f64], background: &[f64]) -> Vec<f64> {
    let mut grid: Vec<f64> = anomaly
        .iter()
        .chain(background)
        .copied()
        .chain([0.0, 1.0])
        .collect();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    grid
}

/// Fraction of `sorted_desc` that is `>= tau`, advancing `cursor` monotonically.
fn rate_at(sorted_desc: &[f64], cursor: &mut usize, tau: f64) -> f64 {
    while *cursor < sorted_desc.len() && sorted_desc[*cursor] >= tau {
        *cursor += 1;
    }
    *cursor as f64 / sorted_desc.len() as f64
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub fn roc_curve(map: &AnomalyMap, gt: &GroundTruth) -> Result<RocCurve> {
    let (anomaly, background) = split_normalized(map, gt)?;
    let (a, b) = (sorted_desc(&anomaly), sorted_desc(&background));
    let (mut ia, mut ib) = (0, 0);
    let mut curve = RocCurve {
        thresholds: Vec::new(),
        pd: Vec::new(),
        pf: Vec::new(),
    };
    for tau in threshold_grid(&anomaly, &background) {
        let pd = rate_at(&a, &mut ia, tau);
        let pf = rate_at(&b, &mut ib, tau);
        if curve.thresholds.is_empty() && (pd, pf) != (0.0, 0.0) {
            curve.thresholds.push(f64::INFINITY);
            curve.pd.push(0.0);
            curve.pf.push(0.0);
        }
        // keep the first threshold of every distinct operating point
        if curve.pd.last() == Some(&pd) && curve.pf.last() == Some(&pf) {
            continue;
        }
        curve.thresholds.push(tau);
        curve.pd.push(pd);
        curve.pf.push(pf);
    }
    Ok(curve)
}

/// Trapezoidal area under PD over PF.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .pf
        .windows(2)
        .zip(curve.pd.windows(2))
        .map(|(f, d)| (f[1] - f[0]) * (d[0] + d[1]) * 0.5)
        .sum()
}

/// Areas under PD(tau) and PF(tau) over `tau ∈ [0, 1]`.
///
/// Both rates are right-continuous step functions of `tau` that only change
/// at observed scores, so the integral is accumulated exactly over the grid:
/// on `(t_{i+1}, t_i]` the rate equals its value at `t_i`.
pub fn threshold_areas(map: &AnomalyMap, gt: &GroundTruth) -> Result<(f64, f64)> {
    let (anomaly, background) = split_normalized(map, gt)?;
    let (a, b) = (sorted_desc(&anomaly), sorted_desc(&background));
    let (mut ia, mut ib) = (0, 0);
    let grid = threshold_grid(&anomaly, &background);
    let (mut area_pd, mut area_pf) = (0.0, 0.0);
    for pair in grid.windows(2) {
        let (hi, lo) = (pair[0], pair[1]);
        area_pd += (hi - lo) * rate_at(&a, &mut ia, hi);
        area_pf += (hi - lo) * rate_at(&b, &mut ib, hi);
    }
    Ok((area_pd, area_pf))
}

/// `10 log10(a_pd / a_pf)` in dB; `+inf` when only `a_pf` is zero.
pub fn snpr(a_pd_tau: f64, a_pf_tau: f64) -> Result<f64> {
    if a_pd_tau < 0.0 || a_pf_tau < 0.0 {
        return Err(Error::Config("threshold areas must be non-negative".into()));
    }
    match (a_pd_tau == 0.0, a_pf_tau == 0.0) {
        (true, true) => Err(Error::SnprUndefined),
        (false, true) => Ok(f64::INFINITY),
        _ => Ok(10.0 * (a_pd_tau / a_pf_tau).log10()),
    }
}

/// Linear-interpolation quantile of ascending data (`p ∈ [0, 1]`).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quantiles(values: &[f64]) -> Quantiles {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Quantiles {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    }
}

/// Quantiles of the normalised scores of each class.
pub fn separability(map: &AnomalyMap, gt: &GroundTruth) -> Result<Separability> {
    let (anomaly, background) = split_normalized(map, gt)?;
    Ok(Separability {
        anomaly: quantiles(&anomaly),
        background: quantiles(&background),
    })
}

pub fn evaluate(map: &AnomalyMap, gt: &GroundTruth) -> Result<(MetricsReport, RocCurve)> {
    let curve = roc_curve(map, gt)?;
    let (a_pd_tau, a_pf_tau) = threshold_areas(map, gt)?;
    let report = MetricsReport {
        auc: auc(&curve),
        a_pd_tau,
        a_pf_tau,
        snpr_db: snpr(a_pd_tau, a_pf_tau)?,
        separability: separability(map, gt)?,
    };
    Ok((report, curve))
}

/// AUC straight from a map.
pub fn map_auc(map: &AnomalyMap, gt: &GroundTruth) -> Result<f64> {
    Ok(auc(&roc_curve(map, gt)?))
}
