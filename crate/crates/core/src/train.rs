//! The self-supervised training loop.
//!
//! Each epoch reconstructs the (band-normalised) image guided by the anomaly
//! map of the previous epoch, takes one Adam step on the chosen loss and
//! replaces the guidance with the per-pixel l2 residual of that
//! reconstruction. Labels are segmented once, before the first epoch.

use serde::{Deserialize, Serialize};

use crate::cube::{AnomalyMap, GroundTruth, HsiCube};
use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::metrics::map_auc;
use crate::model::{
    bind_params, forward_graph, forward_values, scores_from_values, AdaConvConfig, ModelParams,
    Perturbation, DEFAULT_DIM, DEFAULT_LAYERS,
};
use crate::obpm::{l1_loss, l2_loss, obpm_loss, ObpmConfig};
use crate::superpixel::{slic_segment, SegmentLabels, DEFAULT_COMPACTNESS, DEFAULT_MAX_ITERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Obpm,
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// SLIC target segment count.
    pub segments: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    pub adaconv: AdaConvConfig,
    pub obpm: ObpmConfig,
    pub dim: usize,
    pub layers: usize,
    pub log_every: usize,
    pub loss_kind: LossKind,
    pub perturbation: Perturbation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            segments: 100,
            compactness: DEFAULT_COMPACTNESS,
            slic_iters: DEFAULT_MAX_ITERS,
            adaconv: AdaConvConfig::default(),
            obpm: ObpmConfig::default(),
            dim: DEFAULT_DIM,
            layers: DEFAULT_LAYERS,
            log_every: 1,
            loss_kind: LossKind::Obpm,
            perturbation: Perturbation::Spp,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if self.segments == 0 {
            return Err(Error::Config("segments must be >= 1".into()));
        }
        if self.dim == 0 || self.layers == 0 {
            return Err(Error::Config("dim and layers must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        self.adaconv.validate()?;
        self.obpm.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub retained_fraction: f64,
    pub auc: Option<f64>,
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,retained_fraction,auc\n");
    for l in logs {
        let auc = l.auc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", l.epoch, l.loss, l.retained_fraction, auc));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates for a list of tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected Adam update of `params` against `grads`.
    pub fn update(&mut self, params: Vec<&mut Vec<f64>>, grads: &[&[f64]], hp: &AdamConfig) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Shape {
                op: "adam",
                detail: "parameter and gradient tensors do not align".into(),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}

/// Everything needed to rerun detection: configuration, trained parameters
/// and the guidance map the parameters were last evaluated with.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub params: ModelParams,
    pub guidance: AnomalyMap,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub map: AnomalyMap,
    pub model: TrainedModel,
    pub logs: Vec<EpochLog>,
    pub labels: SegmentLabels,
}

fn segment(x: &HsiCube, config: &TrainConfig) -> Result<SegmentLabels> {
    slic_segment(x, config.segments.min(x.pixels()), config.compactness, config.slic_iters)
}

fn score_with(
    x: &HsiCube,
    guidance: &AnomalyMap,
    labels: &SegmentLabels,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<AnomalyMap> {
    let x_hat = forward_values(x, guidance, labels, params, &config.adaconv, config.perturbation)?;
    scores_from_values(x_hat.data(), x.data(), x.height(), x.width(), x.bands())
}

/// Runs the full optimisation on `cube`. When `gt` is given every logged
/// epoch also records the AUC of that epoch's anomaly map.
pub fn train(cube: &HsiCube, config: &TrainConfig, gt: Option<&GroundTruth>) -> Result<TrainOutput> {
    train_with(cube, config, gt, |_, _| {})
}

/// [`train`] with a callback receiving each logged epoch and the anomaly map
/// that epoch produced (the guidance of the next one).
pub fn train_with<F>(
    cube: &HsiCube,
    config: &TrainConfig,
    gt: Option<&GroundTruth>,
    mut observe: F,
) -> Result<TrainOutput>
where
    F: FnMut(&EpochLog, &AnomalyMap),
{
    config.validate()?;
    if let Some(gt) = gt {
        if (gt.height(), gt.width()) != cube.spatial_dims() {
            return Err(Error::Dimensions("ground truth does not match the cube".into()));
        }
    }
    let x = cube.normalize_bands();
    let (h, w, c) = (x.height(), x.width(), x.bands());
    let labels = segment(&x, config)?;
    let mut params = ModelParams::init(c, config.dim, config.layers, config.adaconv.kernel, config.seed)?;
    let mut adam = AdamState::new();
    let hp = AdamConfig {
        lr: config.learning_rate,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
    };
    let mut guidance = AnomalyMap::zeros(h, w);
    let mut logs = Vec::new();

    for epoch in 1..=config.epochs {
        let mut g = Graph::new();
        let pv = bind_params(&mut g, &params, true)?;
        let (xv, x_hat) = forward_graph(
            &mut g,
            &x,
            &guidance,
            &labels,
            &pv,
            &params,
            &config.adaconv,
            config.perturbation,
        )?;
        let (loss, retained_fraction) = match config.loss_kind {
            LossKind::Obpm => {
                let (loss, report) = obpm_loss(&mut g, x_hat, xv, &labels, &config.obpm)?;
                (loss, report.retained_fraction())
            }
            LossKind::L1 => (l1_loss(&mut g, x_hat, xv)?, 1.0),
            LossKind::L2 => (l2_loss(&mut g, x_hat, xv)?, 1.0),
        };
        let loss_value = g.value(loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        g.backward(loss)?;

        let next_guidance = scores_from_values(g.value(x_hat), x.data(), h, w, c)
            .map_err(|_| Error::NonFiniteLoss { epoch })?;
        let vars = pv.all();
        let grads: Vec<&[f64]> = vars.iter().map(|&v| g.grad(v)).collect();
        adam.update(params.tensors_mut(), &grads, &hp)?;
        if params.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        guidance = next_guidance;

        if epoch % config.log_every == 0 || epoch == config.epochs {
            let auc = gt.map(|gt| map_auc(&guidance, gt)).transpose()?;
            let log = EpochLog {
                epoch,
                loss: loss_value,
                retained_fraction,
                auc,
            };
            observe(&log, &guidance);
            logs.push(log);
        }
    }

    let map = score_with(&x, &guidance, &labels, &params, config)?;
    Ok(TrainOutput {
        map,
        model: TrainedModel {
            config: config.clone(),
            height: h,
            width: w,
            bands: c,
            params,
            guidance,
        },
        logs,
        labels,
    })
}

/// Scores `cube` with a trained model: one guided forward pass using the
/// stored guidance map.
pub fn detect(cube: &HsiCube, model: &TrainedModel) -> Result<AnomalyMap> {
    if (cube.height(), cube.width(), cube.bands()) != (model.height, model.width, model.bands) {
        return Err(Error::Dimensions(format!(
            "model was trained on {}x{}x{}, cube is {}x{}x{}",
            model.height,
            model.width,
            model.bands,
            cube.height(),
            cube.width(),
            cube.bands()
        )));
    }
    let x = cube.normalize_bands();
    let labels = segment(&x, &model.config)?;
    score_with(&x, &model.guidance, &labels, &model.params, &model.config)
}
