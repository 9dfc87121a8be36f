//! Browser bindings: transition matrices, the Monte-Carlo Jacobian-norm
//! estimator against its exact value, and a two-moons training run that can
//! be stepped one epoch at a time and drawn.

use wasm_bindgen::prelude::*;

use noisereg::config::{parse_noise, ExperimentConfig};
use noisereg::experiment::Trainer;
use noisereg::jacobian::{mc_jacobian_norm, mean_exact_frob_sq, sample_bound};
use noisereg::loss::argmax;
use noisereg::mlp::{Activation, MlpModel};
use noisereg::variance_reg::PredictionSpace;
use noisereg::{Matrix, RngStream};

/// Plot window for the two-moons view: `[x_min, x_max, y_min, y_max]`.
pub const VIEW: [f64; 4] = [-1.5, 2.5, -1.0, 1.5];

fn js(e: noisereg::Error) -> JsError {
    JsError::new(&e.to_string())
}

pub fn transition_matrix(kind: &str, k: usize, eta: f64) -> noisereg::Result<Vec<f64>> {
    let t = parse_noise(kind, eta, false)?.transition_matrix(k)?;
    Ok(t.matrix().as_slice().to_vec())
}

/// Row-major K×K transition matrix for `kind` in {uniform, asym10, circular}.
#[wasm_bindgen]
pub fn noise_matrix(kind: &str, k: usize, eta: f64) -> Result<Vec<f64>, JsError> {
    transition_matrix(kind, k, eta).map_err(js)
}

/// `[exact, estimate, std_error, sample_bound]` for a fixed random 2-16-3
/// tanh net on 16 fixed points, logits space.
pub fn jacobian_comparison(sigma: f64, pairs: usize, seed: u32) -> noisereg::Result<Vec<f64>> {
    let mut init = RngStream::new(1, 0);
    let model = MlpModel::new(&[2, 16, 3], Activation::Tanh, 0.0, &mut init)?;
    let mut x = Matrix::zeros(16, 2);
    for v in x.as_mut_slice() {
        *v = init.normal();
    }
    let exact = mean_exact_frob_sq(&model, &x, PredictionSpace::Logits)?;
    let mut rng = RngStream::new(seed as u64, 0);
    let mc = mc_jacobian_norm(&model, &x, sigma, pairs, PredictionSpace::Logits, &mut rng)?;
    let bound = sample_bound(0.1, 0.05)?;
    Ok(vec![exact, mc.estimate, mc.std_error, bound as f64])
}

#[wasm_bindgen]
pub fn jacobian_demo(sigma: f64, pairs: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    jacobian_comparison(sigma, pairs, seed).map_err(js)
}

pub fn moons_config(lambda: f64, eta: f64, sigma: f64, epochs: usize, seed: u32) -> noisereg::Result<ExperimentConfig> {
    ExperimentConfig::from_toml_str(&format!(
        r#"
        dataset = "two_moons"
        n_samples = 400
        noise_sd = 0.12
        noise = "uniform"
        eta = {eta:?}
        hidden_dims = [128, 128]
        activation = "relu"
        epochs = {epochs}
        batch_size = 32
        base_lr = 0.1
        lambda_max = {lambda:?}
        gaussian_sigma = {sigma:?}
        seed = {seed}
        lid_k = 20
        lid_batch = 120
        lid_batches = 1
        csr_points = 40
        "#
    ))
}

/// A two-moons run with label noise.
#[wasm_bindgen]
pub struct MoonsRun {
    trainer: Trainer,
}

impl MoonsRun {
    pub fn create(lambda: f64, eta: f64, sigma: f64, epochs: usize, seed: u32) -> noisereg::Result<MoonsRun> {
        let cfg = moons_config(lambda, eta, sigma, epochs, seed)?;
        Ok(MoonsRun { trainer: Trainer::new(&cfg, 0)? })
    }

    /// `[epoch, test_acc, train_acc_vs_noisy, label_precision, lid_mean]`.
    pub fn advance(&mut self) -> noisereg::Result<Vec<f64>> {
        let row = self.trainer.train_epoch()?.expect("diagnostics run every epoch");
        Ok(vec![
            row.epoch as f64,
            row.test_acc,
            row.train_acc_vs_noisy,
            row.label_precision,
            row.lid_mean,
        ])
    }

    /// Predicted class on a `width`×`height` grid over `VIEW`, row 0 at the top.
    pub fn grid(&self, width: usize, height: usize) -> noisereg::Result<Vec<u8>> {
        let [x0, x1, y0, y1] = VIEW;
        let mut pts = Matrix::zeros(width * height, 2);
        for r in 0..height {
            for c in 0..width {
                let row = pts.row_mut(r * width + c);
                row[0] = x0 + (c as f64 + 0.5) / width as f64 * (x1 - x0);
                row[1] = y1 - (r as f64 + 0.5) / height as f64 * (y1 - y0);
            }
        }
        let logits = self.trainer.model().predict_logits(&pts)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i)) as u8).collect())
    }
}

#[wasm_bindgen]
impl MoonsRun {
    #[wasm_bindgen(constructor)]
    pub fn new(lambda: f64, eta: f64, sigma: f64, epochs: usize, seed: u32) -> Result<MoonsRun, JsError> {
        Self::create(lambda, eta, sigma, epochs, seed).map_err(js)
    }

    pub fn done(&self) -> bool {
        self.trainer.is_done()
    }

    pub fn step(&mut self) -> Result<Vec<f64>, JsError> {
        self.advance().map_err(js)
    }

    pub fn decision_grid(&self, width: usize, height: usize) -> Result<Vec<u8>, JsError> {
        self.grid(width, height).map_err(js)
    }

    /// Training points as `[x, y, observed label, 1 if label is clean else 0]`
    /// quadruples.
    pub fn points(&self) -> Vec<f64> {
        let train = &self.trainer.splits().train;
        let mask = train.clean_mask();
        let mut out = Vec::with_capacity(train.len() * 4);
        for (i, &label) in train.observed_labels().iter().enumerate() {
            let row = train.features.row(i);
            out.extend_from_slice(&[row[0], row[1], label as f64, if mask[i] { 1.0 } else { 0.0 }]);
        }
        out
    }

    pub fn view() -> Vec<f64> {
        VIEW.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrices_are_row_major_and_stochastic() {
        let t = transition_matrix("circular", 3, 0.3).unwrap();
        assert_eq!(t, vec![0.7, 0.3, 0.0, 0.0, 0.7, 0.3, 0.3, 0.0, 0.7]);
        assert!(transition_matrix("asym10", 4, 0.2).is_err());
    }

    #[test]
    fn jacobian_estimate_is_close_to_exact() {
        let r = jacobian_comparison(1e-3, 20_000, 4).unwrap();
        assert!((r[1] - r[0]).abs() <= 4.0 * r[2] + 0.01 * r[0], "{r:?}");
        assert_eq!(r[3], 7378.0);
    }

    #[test]
    fn moons_run_steps_and_draws() {
        let mut run = MoonsRun::create(5.0, 0.2, 0.1, 3, 1).unwrap();
        let mut epochs = 0;
        while !run.done() {
            let m = run.advance().unwrap();
            epochs += 1;
            assert_eq!(m[0], epochs as f64);
            assert!((0.0..=1.0).contains(&m[1]));
        }
        assert_eq!(epochs, 3);
        let g = run.grid(8, 5).unwrap();
        assert_eq!(g.len(), 40);
        assert!(g.iter().all(|&c| c < 2));
        assert_eq!(run.points().len(), 320 * 4);
    }
}
