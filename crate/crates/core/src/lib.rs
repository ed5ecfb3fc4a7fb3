//! Self-supervised hyperspectral anomaly detection by superpixel-pooled
//! reconstruction.
//!
//! The pipeline segments the image into superpixels, reconstructs it from the
//! pooled superpixel spectra and an error-adaptive convolution of the input,
//! and trains against a loss that mines hard background pixels while ignoring
//! likely anomalies. A global RX detector and a metrics suite are included for
//! comparison.

pub mod cube;
pub mod diff;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod modelfile;
pub mod obpm;
pub mod rxd;
pub mod superpixel;
pub mod synth;
pub mod train;

pub use cube::{AnomalyMap, GroundTruth, HsiCube};
pub use error::{Error, Result};
pub use model::{AdaConvConfig, ModelParams, Perturbation};
pub use obpm::ObpmConfig;
pub use superpixel::SegmentLabels;
pub use synth::SceneSpec;
pub use train::{LossKind, TrainConfig, TrainedModel};
