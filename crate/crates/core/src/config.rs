//! Experiment configuration, read from a flat key-value TOML document.
//!
//! Every key is optional and falls back to the desk-scale default; unknown
//! keys are rejected.

use std::path::PathBuf;

use serde::Deserialize;

use crate::diagnostics::{CsrConfig, LidConfig};
use crate::error::{Error, Result};
use crate::mlp::Activation;
use crate::noise::NoiseModel;
use crate::variance_reg::{PerturbationSpec, PredictionSpace, RegularizerConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        k: usize,
        d: usize,
        n: usize,
        cluster_sep: f64,
    },
    TwoMoons {
        n: usize,
        noise_sd: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    /// A dataset container written by `write_dataset`.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSpec {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsSpec {
    pub every: usize,
    pub lid: LidConfig,
    /// How many LID batches to average (capped by what the test set holds).
    pub lid_batches: usize,
    pub csr: CsrConfig,
    /// Number of test points probed for CSR.
    pub csr_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub noise: NoiseModel,
    pub model: ModelSpec,
    pub optim: OptimSpec,
    pub regularizer: RegularizerConfig,
    pub perturbation: PerturbationSpec,
    pub seed: u64,
    pub test_fraction: f64,
    pub diagnostics: DiagnosticsSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.into_config()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match &self.dataset {
            DatasetSpec::Blobs { k, d, n, .. } if *k < 2 || *d < 2 || n < k => {
                return bad(format!("blobs need k >= 2, d >= 2, n >= k (k={k}, d={d}, n={n})"))
            }
            DatasetSpec::TwoMoons { n, .. } if *n == 0 || n % 2 != 0 => {
                return bad(format!("two_moons n must be even and positive, got {n}"))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.model.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.model.dropout_rate));
        }
        if self.model.hidden_dims.contains(&0) {
            return bad("hidden_dims entries must be positive".into());
        }
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&o.momentum) || o.base_lr < 0.0 || o.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1); base_lr and weight_decay >= 0".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        let eta = self.noise.eta();
        if !(0.0..=1.0).contains(&eta) {
            return bad(format!("eta {eta} outside [0, 1]"));
        }
        self.regularizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.perturbation.validate().map_err(|e| Error::Config(e.to_string()))?;
        let dg = &self.diagnostics;
        if dg.every == 0 {
            return bad("diagnostics_every must be positive".into());
        }
        if dg.lid.k < 2 || dg.lid.batch_size <= dg.lid.k {
            return bad(format!(
                "lid_k must satisfy 2 <= k < lid_batch (k={}, batch={})",
                dg.lid.k, dg.lid.batch_size
            ));
        }
        if dg.csr.radius.is_nan() || dg.csr.radius <= 0.0 || dg.csr.probes == 0 {
            return bad("csr_radius must be > 0 and csr_probes >= 1".into());
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        RawConfig::default().into_config().expect("defaults are valid")
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    dataset: String,
    n_classes: usize,
    n_features: usize,
    n_samples: usize,
    cluster_sep: f64,
    noise_sd: f64,
    idx_images: Option<PathBuf>,
    idx_labels: Option<PathBuf>,
    data_path: Option<PathBuf>,

    noise: String,
    eta: f64,
    allow_self_flip: bool,

    hidden_dims: Vec<usize>,
    activation: String,
    dropout_rate: f64,

    base_lr: f64,
    momentum: f64,
    weight_decay: f64,
    epochs: usize,
    batch_size: usize,

    lambda_max: f64,
    rampup_epochs: usize,
    prediction_space: String,
    gaussian_sigma: f64,
    dropout_on: bool,

    seed: u64,
    test_fraction: f64,
    diagnostics_every: usize,
    lid_k: usize,
    lid_batch: usize,
    lid_batches: usize,
    csr_radius: f64,
    csr_probes: usize,
    csr_step: Option<f64>,
    csr_points: usize,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            dataset: "blobs".into(),
            n_classes: 4,
            n_features: 20,
            n_samples: 2000,
            cluster_sep: 10.0,
            noise_sd: 0.1,
            idx_images: None,
            idx_labels: None,
            data_path: None,
            noise: "none".into(),
            eta: 0.0,
            allow_self_flip: false,
            hidden_dims: vec![128, 128],
            activation: "relu".into(),
            dropout_rate: 0.0,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 150,
            batch_size: 128,
            lambda_max: 0.0,
            rampup_epochs: 5,
            prediction_space: "probabilities".into(),
            gaussian_sigma: 0.0,
            dropout_on: false,
            seed: 0,
            test_fraction: 0.2,
            diagnostics_every: 1,
            lid_k: 20,
            lid_batch: 128,
            lid_batches: 10,
            csr_radius: 0.5,
            csr_probes: 10,
            csr_step: None,
            csr_points: 200,
        }
    }
}

impl RawConfig {
    fn into_config(self) -> Result<ExperimentConfig> {
        let dataset = match self.dataset.as_str() {
            "blobs" => DatasetSpec::Blobs {
                k: self.n_classes,
                d: self.n_features,
                n: self.n_samples,
                cluster_sep: self.cluster_sep,
            },
            "two_moons" => DatasetSpec::TwoMoons {
                n: self.n_samples,
                noise_sd: self.noise_sd,
            },
            "idx" => DatasetSpec::Idx {
                images: self
                    .idx_images
                    .ok_or_else(|| Error::Config("dataset = \"idx\" needs idx_images".into()))?,
                labels: self
                    .idx_labels
                    .ok_or_else(|| Error::Config("dataset = \"idx\" needs idx_labels".into()))?,
            },
            "file" => DatasetSpec::File(
                self.data_path
                    .ok_or_else(|| Error::Config("dataset = \"file\" needs data_path".into()))?,
            ),
            other => return Err(Error::Config(format!("unknown dataset '{other}'"))),
        };
        let noise = parse_noise(&self.noise, self.eta, self.allow_self_flip)?;
        let activation = self
            .activation
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))?;
        let prediction_space: PredictionSpace = self
            .prediction_space
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))?;
        let cfg = ExperimentConfig {
            dataset,
            noise,
            model: ModelSpec {
                hidden_dims: self.hidden_dims,
                activation,
                dropout_rate: self.dropout_rate,
            },
            optim: OptimSpec {
                base_lr: self.base_lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                epochs: self.epochs,
                batch_size: self.batch_size,
            },
            regularizer: RegularizerConfig {
                lambda_max: self.lambda_max,
                rampup_epochs: self.rampup_epochs,
                prediction_space,
            },
            perturbation: PerturbationSpec {
                gaussian_sigma: self.gaussian_sigma,
                dropout_on: self.dropout_on,
            },
            seed: self.seed,
            test_fraction: self.test_fraction,
            diagnostics: DiagnosticsSpec {
                every: self.diagnostics_every,
                lid: LidConfig {
                    k: self.lid_k,
                    batch_size: self.lid_batch,
                    feature_layer: None,
                },
                lid_batches: self.lid_batches,
                csr: CsrConfig {
                    radius: self.csr_radius,
                    probes: self.csr_probes,
                    step: self.csr_step,
                },
                csr_points: self.csr_points,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a noise family name as used in configs and on the command line.
pub fn parse_noise(name: &str, eta: f64, allow_self_flip: bool) -> Result<NoiseModel> {
    match name {
        "none" => Ok(NoiseModel::None),
        "uniform" => Ok(NoiseModel::Uniform {
            eta,
            allow_self_flip,
        }),
        "asym10" => Ok(NoiseModel::Asym10 { eta }),
        "circular" => Ok(NoiseModel::Circular { eta }),
        other => Err(Error::Config(format!("unknown noise model '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::default();
        assert_eq!(c.optim.epochs, 150);
        assert_eq!(c.optim.batch_size, 128);
        assert_eq!(c.optim.momentum, 0.9);
        assert_eq!(c.optim.weight_decay, 1e-4);
        assert_eq!(c.regularizer.rampup_epochs, 5);
    }

    #[test]
    fn parses_module_keys() {
        let c = ExperimentConfig::from_toml_str(
            r#"
            dataset = "two_moons"
            n_samples = 400
            noise = "uniform"
            eta = 0.4
            lambda_max = 30.0
            rampup_epochs = 3
            gaussian_sigma = 0.1
            dropout_on = true
            dropout_rate = 0.2
            prediction_space = "logits"
            hidden_dims = [16, 16]
            activation = "tanh"
            "#,
        )
        .unwrap();
        assert_eq!(c.dataset, DatasetSpec::TwoMoons { n: 400, noise_sd: 0.1 });
        assert_eq!(c.noise.eta(), 0.4);
        assert_eq!(c.regularizer.prediction_space, PredictionSpace::Logits);
        assert!(c.perturbation.dropout_on);
        assert_eq!(c.model.activation, Activation::Tanh);
    }

    #[test]
    fn unknown_key_is_error() {
        let err = ExperimentConfig::from_toml_str("lambda = 3.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "eta = 1.5\nnoise = \"uniform\"",
            "dropout_rate = 1.0",
            "lid_k = 200",
            "noise = \"gaussian\"",
            "dataset = \"idx\"",
            "momentum = 1.0",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
    }
}
