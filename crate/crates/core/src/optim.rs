//! Momentum SGD with coupled weight decay, and the cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{Gradients, MlpModel};

#[derive(Debug, Clone)]
pub struct OptimState {
    velocity: Vec<Matrix>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub total_steps: usize,
}

impl OptimState {
    pub fn new(
        model: &MlpModel,
        momentum: f64,
        weight_decay: f64,
        base_lr: f64,
        total_steps: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} outside [0, 1)")));
        }
        if weight_decay < 0.0 || base_lr < 0.0 {
            return Err(Error::Parameter("weight decay and lr must be >= 0".into()));
        }
        Ok(Self {
            velocity: model
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            momentum,
            weight_decay,
            base_lr,
            total_steps,
        })
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }
}

/// One update over a list of parameters:
///
/// ```text
/// v ← momentum·v + (grad + weight_decay·param)
/// param ← param − lr·v
/// ```
pub fn sgd_momentum_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if lr < 0.0 {
        return Err(Error::Parameter(format!("negative learning rate {lr}")));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        p.check_same_shape(g)?;
        p.check_same_shape(v)?;
        let (mu, wd) = (state.momentum, state.weight_decay);
        for ((pv, &gv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            *vv = mu * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Applies [`sgd_momentum_step`] to every parameter of `model`.
pub fn step_model(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    let g = grads.params();
    let mut p = model.params_mut();
    sgd_momentum_step(&mut p, &g, state, lr)
}

/// Single-cycle cosine annealing from `base_lr` at step 0 to 0 at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Parameter("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Range {
            step,
            total: total_steps,
        });
    }
    Ok(0.5 * base_lr * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_for(shape: (usize, usize), momentum: f64, wd: f64) -> OptimState {
        OptimState {
            velocity: vec![Matrix::zeros(shape.0, shape.1)],
            momentum,
            weight_decay: wd,
            base_lr: 0.1,
            total_steps: 10,
        }
    }

    #[test]
    fn zero_lr_only_updates_velocity() {
        let mut w = Matrix::from_rows(&[[1.0, -2.0]]);
        let g = Matrix::from_rows(&[[0.5, 0.25]]);
        let mut st = state_for((1, 2), 0.9, 0.0);
        sgd_momentum_step(&mut [&mut w], &[&g], &mut st, 0.0).unwrap();
        assert_eq!(w, Matrix::from_rows(&[[1.0, -2.0]]));
        assert_eq!(st.velocity[0], g);
    }

    #[test]
    fn plain_descent_on_square() {
        // f(w) = w², f'(1) = 2
        let mut w = Matrix::from_rows(&[[1.0]]);
        let g = Matrix::from_rows(&[[2.0]]);
        let mut st = state_for((1, 1), 0.0, 0.0);
        sgd_momentum_step(&mut [&mut w], &[&g], &mut st, 0.1).unwrap();
        assert!((w[(0, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn second_momentum_displacement() {
        let (lr, gv) = (0.05, 3.0);
        let mut w = Matrix::from_rows(&[[0.0]]);
        let g = Matrix::from_rows(&[[gv]]);
        let mut st = state_for((1, 1), 0.9, 0.0);
        sgd_momentum_step(&mut [&mut w], &[&g], &mut st, lr).unwrap();
        let after_one = w[(0, 0)];
        sgd_momentum_step(&mut [&mut w], &[&g], &mut st, lr).unwrap();
        let second = after_one - w[(0, 0)];
        assert!((second - 1.9 * lr * gv).abs() < 1e-14);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let mut w = Matrix::from_rows(&[[2.0]]);
        let g = Matrix::from_rows(&[[0.0]]);
        let mut st = state_for((1, 1), 0.0, 0.5);
        sgd_momentum_step(&mut [&mut w], &[&g], &mut st, 0.1).unwrap();
        assert!((w[(0, 0)] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut w = Matrix::zeros(1, 2);
        let g = Matrix::zeros(2, 1);
        let mut st = state_for((1, 2), 0.0, 0.0);
        assert!(sgd_momentum_step(&mut [&mut w], &[&g], &mut st, 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 0.1), Err(Error::Range { .. })));
        assert!(cosine_lr(0, 0, 0.1).is_err());
    }
}
