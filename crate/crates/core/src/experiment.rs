//! The training loop: data, corruption, the combined objective, the
//! schedule, and periodic diagnostics.

use std::fs::File;
use std::io::{BufReader, Write};

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::{load_idx, make_blobs, make_two_moons, read_dataset, stratified_split};
use crate::diagnostics::{critical_sample_ratio, label_precision, mean_lid_over_batches};
use crate::error::{Error, Result};
use crate::loss::{accuracy, per_example_cross_entropy};
use crate::matrix::Matrix;
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::mlp::MlpModel;
use crate::noise::{corrupt, LabeledDataset, NoiseModel};
use crate::optim::{cosine_lr, step_model, OptimState};
use crate::rng::RngStream;
use crate::variance_reg::{combined_objective, lambda_at};

// Child-stream tags; one per consumer so adding draws in one place does
// not shift any other.
const TAG_DATA: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_SHUFFLE: u64 = 5;
const TAG_PERTURB: u64 = 6;
const TAG_CSR: u64 = 7;

/// Clean data for the configured source.
pub fn load_dataset(spec: &DatasetSpec, rng: &mut RngStream) -> Result<LabeledDataset> {
    match spec {
        DatasetSpec::Blobs {
            k,
            d,
            n,
            cluster_sep,
        } => make_blobs(*k, *d, *n, *cluster_sep, rng),
        DatasetSpec::TwoMoons { n, noise_sd } => make_two_moons(*n, *noise_sd, rng),
        DatasetSpec::Idx { images, labels } => load_idx(
            BufReader::new(File::open(images)?),
            BufReader::new(File::open(labels)?),
        ),
        DatasetSpec::File(path) => read_dataset(BufReader::new(File::open(path)?)),
    }
}

/// Train split (labels possibly corrupted) and clean test split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl Splits {
    /// Splits first, then corrupts only the training part. A dataset file
    /// that already carries noisy labels keeps them when `noise` is `None`.
    pub fn prepare(
        data: LabeledDataset,
        noise: &NoiseModel,
        test_fraction: f64,
        split_rng: &mut RngStream,
        noise_rng: &mut RngStream,
    ) -> Result<Self> {
        let (train_idx, test_idx) =
            stratified_split(&data.clean_labels, data.num_classes, test_fraction, split_rng)?;
        let mut train = data.subset(&train_idx);
        let mut test = data.subset(&test_idx);
        test.noisy_labels = None;
        if *noise != NoiseModel::None {
            train.noisy_labels = None;
            let t = noise.transition_matrix(train.num_classes)?;
            train = corrupt(&train, &t, noise_rng)?;
        }
        let splits = Self { train, test };
        splits.check_clean_test()?;
        Ok(splits)
    }

    pub fn check_clean_test(&self) -> Result<()> {
        if self.test.noisy_labels.is_some() {
            return Err(Error::Config("the test split must carry clean labels only".into()));
        }
        Ok(())
    }
}

/// The clean dataset a run with this config and stream would train on.
pub fn generate_dataset(cfg: &ExperimentConfig, stream_id: u64) -> Result<LabeledDataset> {
    let root = RngStream::new(cfg.seed, stream_id);
    load_dataset(&cfg.dataset, &mut root.derive(TAG_DATA))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub model: MlpModel,
    pub splits: Splits,
}

/// Runs one training experiment. `stream_id` separates runs of a grid that
/// share a seed. Rows are written to `metrics` as they are produced.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    stream_id: u64,
    metrics: Option<&mut dyn Write>,
) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg, stream_id)?;
    let mut writer = match metrics {
        Some(w) => Some(MetricsWriter::new(w)?),
        None => None,
    };
    let mut rows = Vec::new();
    while !trainer.is_done() {
        match trainer.train_epoch() {
            Ok(Some(row)) => {
                if let Some(w) = writer.as_mut() {
                    w.write_row(&row)?;
                }
                rows.push(row);
            }
            Ok(None) => {}
            Err(Error::Divergence { epoch }) => {
                if let Some(w) = writer.as_mut() {
                    w.write_row(&MetricsRow::divergence_marker(epoch))?;
                }
                log::error!("training diverged in epoch {epoch}");
                return Err(Error::Divergence { epoch });
            }
            Err(e) => return Err(e),
        }
    }
    let (model, splits) = trainer.into_parts();
    Ok(RunOutput {
        rows,
        model,
        splits,
    })
}

/// A training run advanced one epoch at a time.
pub struct Trainer {
    cfg: ExperimentConfig,
    root: RngStream,
    splits: Splits,
    clean_mask: Vec<bool>,
    model: MlpModel,
    state: OptimState,
    shuffle_rng: RngStream,
    perturb_rng: RngStream,
    order: Vec<usize>,
    step: usize,
    total_steps: usize,
    epoch: usize,
    diverged: bool,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, stream_id: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(cfg.seed, stream_id);
        let data = generate_dataset(cfg, stream_id)?;
        let splits = Splits::prepare(
            data,
            &cfg.noise,
            cfg.test_fraction,
            &mut root.derive(TAG_SPLIT),
            &mut root.derive(TAG_NOISE),
        )?;
        let train = &splits.train;
        if train.len() < 2 {
            return Err(Error::Config("training split is too small".into()));
        }

        let mut dims = vec![train.dim()];
        dims.extend_from_slice(&cfg.model.hidden_dims);
        dims.push(train.num_classes);
        let model = MlpModel::new(
            &dims,
            cfg.model.activation,
            cfg.model.dropout_rate,
            &mut root.derive(TAG_INIT),
        )?;

        let o = cfg.optim;
        let total_steps = o.epochs * train.len().div_ceil(o.batch_size);
        let state = OptimState::new(&model, o.momentum, o.weight_decay, o.base_lr, total_steps)?;
        Ok(Self {
            cfg: cfg.clone(),
            clean_mask: train.clean_mask(),
            order: (0..train.len()).collect(),
            shuffle_rng: root.derive(TAG_SHUFFLE),
            perturb_rng: root.derive(TAG_PERTURB),
            root,
            splits,
            model,
            state,
            step: 0,
            total_steps,
            epoch: 0,
            diverged: false,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.diverged || self.epoch >= self.cfg.optim.epochs
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn into_parts(self) -> (MlpModel, Splits) {
        (self.model, self.splits)
    }

    /// Trains one epoch. Returns the metrics row when diagnostics are due
    /// (every `diagnostics.every` epochs and at the last one), and
    /// `Error::Divergence` if the loss or parameters stop being finite.
    pub fn train_epoch(&mut self) -> Result<Option<MetricsRow>> {
        if self.is_done() {
            return Err(Error::State("training already finished".into()));
        }
        let o = self.cfg.optim;
        let epoch = self.epoch;
        let lr_start = cosine_lr(self.step, self.total_steps, o.base_lr)?;
        let lambda_eff = lambda_at(epoch, &self.cfg.regularizer);
        self.shuffle_rng.shuffle(&mut self.order);
        let train = &self.splits.train;
        let labels = train.observed_labels();
        let mut loss_sum = 0.0;
        let mut rv_sum = 0.0;
        let mut seen = 0usize;
        let mut diverged = false;
        for chunk in self.order.chunks(o.batch_size) {
            let xb = train.features.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let obj = match combined_objective(
                &self.model,
                &xb,
                &yb,
                &self.cfg.perturbation,
                &self.cfg.regularizer,
                epoch,
                &mut self.perturb_rng,
            ) {
                Ok(obj) => obj,
                Err(Error::NumericOverflow { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !obj.loss.is_finite() {
                diverged = true;
                break;
            }
            let lr = cosine_lr(self.step, self.total_steps, o.base_lr)?;
            step_model(&mut self.model, &obj.gradients, &mut self.state, lr)?;
            if self.model.params().iter().any(|p| !p.is_finite()) {
                diverged = true;
                break;
            }
            self.step += 1;
            loss_sum += obj.loss * chunk.len() as f64;
            rv_sum += obj.components.rv * chunk.len() as f64;
            seen += chunk.len();
        }
        self.epoch += 1;
        if diverged {
            self.diverged = true;
            return Err(Error::Divergence { epoch: self.epoch });
        }

        let last = self.epoch == o.epochs;
        if !self.epoch.is_multiple_of(self.cfg.diagnostics.every) && !last {
            return Ok(None);
        }
        let mut csr_rng = self.root.derive(TAG_CSR).derive(epoch as u64);
        let row = evaluate(
            &self.cfg,
            &self.model,
            &self.splits,
            &self.clean_mask,
            EpochStats {
                epoch: self.epoch,
                lr: lr_start,
                lambda_eff,
                train_loss: loss_sum / seen as f64,
                rv_hat_mean: rv_sum / seen as f64,
            },
            &mut csr_rng,
        )?;
        log::debug!(
            "epoch {} loss {:.4} test {:.4} lp {:.4} lid {:.3}",
            row.epoch,
            row.train_loss,
            row.test_acc,
            row.label_precision,
            row.lid_mean
        );
        Ok(Some(row))
    }
}

struct EpochStats {
    epoch: usize,
    lr: f64,
    lambda_eff: f64,
    train_loss: f64,
    rv_hat_mean: f64,
}

fn evaluate(
    cfg: &ExperimentConfig,
    model: &MlpModel,
    splits: &Splits,
    clean_mask: &[bool],
    stats: EpochStats,
    csr_rng: &mut RngStream,
) -> Result<MetricsRow> {
    let train = &splits.train;
    let test = &splits.test;
    let train_logits = model.predict_logits(&train.features)?;
    // losses without perturbation
    let losses = per_example_cross_entropy(&train_logits, train.observed_labels())?;
    let eta = cfg.noise.eta().min(1.0 - 1e-12);
    let precision = label_precision(&losses, clean_mask, eta)?;
    let test_acc = if test.is_empty() {
        f64::NAN
    } else {
        accuracy(&model.predict_logits(&test.features)?, &test.clean_labels)
    };
    Ok(MetricsRow {
        epoch: stats.epoch,
        lr: stats.lr,
        lambda_eff: stats.lambda_eff,
        train_loss: stats.train_loss,
        train_acc_vs_noisy: accuracy(&train_logits, train.observed_labels()),
        train_acc_vs_clean: accuracy(&train_logits, &train.clean_labels),
        test_acc,
        label_precision: precision,
        lid_mean: mean_lid(cfg, model, &test.features)?,
        csr: csr(cfg, model, &test.features, csr_rng)?,
        rv_hat_mean: stats.rv_hat_mean,
    })
}

/// Mean LID over the evaluation set, as configured for the run.
pub fn mean_lid(cfg: &ExperimentConfig, model: &MlpModel, x: &Matrix) -> Result<f64> {
    mean_lid_over_batches(model, x, &cfg.diagnostics.lid, cfg.diagnostics.lid_batches)
}

fn csr(cfg: &ExperimentConfig, model: &MlpModel, x: &Matrix, rng: &mut RngStream) -> Result<f64> {
    let n = x.rows().min(cfg.diagnostics.csr_points);
    if n == 0 {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..n).collect();
    critical_sample_ratio(model, &x.select_rows(&idx), &cfg.diagnostics.csr, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::read_metrics_csv;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
            dataset = "blobs"
            n_classes = 3
            n_features = 5
            n_samples = 300
            cluster_sep = 6.0
            noise = "uniform"
            eta = 0.3
            hidden_dims = [16]
            epochs = 4
            batch_size = 32
            lambda_max = 5.0
            gaussian_sigma = 0.3
            lid_k = 5
            lid_batch = 30
            csr_points = 20
            "#,
        )
        .unwrap()
    }

    #[test]
    fn test_split_stays_clean() {
        let cfg = small_cfg();
        let out = run_experiment(&cfg, 0, None).unwrap();
        assert!(out.splits.test.noisy_labels.is_none());
        assert!(out.splits.train.noisy_labels.is_some());
        assert_eq!(out.splits.train.len() + out.splits.test.len(), 300);
    }

    #[test]
    fn rows_are_valid_and_written() {
        let cfg = small_cfg();
        let mut buf = Vec::new();
        let out = run_experiment(&cfg, 0, Some(&mut buf)).unwrap();
        assert_eq!(out.rows.len(), 4);
        let back = read_metrics_csv(buf.as_slice()).unwrap();
        assert_eq!(back, out.rows);
        for (i, r) in out.rows.iter().enumerate() {
            assert_eq!(r.epoch, i + 1);
            for v in [r.train_acc_vs_noisy, r.train_acc_vs_clean, r.test_acc, r.label_precision, r.csr] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(r.lid_mean > 0.0);
        }
    }

    #[test]
    fn diagnostics_every_keeps_last_epoch() {
        let mut cfg = small_cfg();
        cfg.optim.epochs = 5;
        cfg.diagnostics.every = 2;
        let out = run_experiment(&cfg, 0, None).unwrap();
        let epochs: Vec<usize> = out.rows.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![2, 4, 5]);
    }

    #[test]
    fn divergence_writes_marker() {
        let mut cfg = small_cfg();
        cfg.optim.base_lr = 1e6;
        cfg.regularizer.lambda_max = 0.0;
        cfg.optim.momentum = 0.0;
        let mut buf = Vec::new();
        let err = run_experiment(&cfg, 0, Some(&mut buf)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        let rows = read_metrics_csv(buf.as_slice()).unwrap();
        assert!(rows.last().unwrap().is_divergence_marker());
    }
}
