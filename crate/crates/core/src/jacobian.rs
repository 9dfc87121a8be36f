//! Input-output Jacobians and the Monte-Carlo Jacobian-norm estimator.
//!
//! With `ξ, ξ′ ~ N(0, σ²I)` and `f` locally linear around `x`,
//! `‖f(x+ξ′) − f(x+ξ)‖² / (2σ²)` has expectation `‖J(x)‖_F²`. The helpers
//! here compute the exact Jacobian by reverse mode, the sampled estimate,
//! and the variance of the underlying quadratic form `zᵀAz` with
//! `A = JᵀJ`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{Activation, MlpModel, PerturbationDraws};
use crate::rng::RngStream;
use crate::variance_reg::{PerturbationSpec, PredictionSpace};

#[derive(Debug, Clone)]
pub struct JacobianReport {
    /// `K × D`.
    pub jacobian: Matrix,
    /// `‖J‖_F²`.
    pub frob_sq: f64,
    /// `D × D`, `JᵀJ`.
    pub gram: Matrix,
    /// Hidden pre-activations sitting exactly on a relu kink, where the
    /// derivative was taken as 0.
    pub relu_kinks: usize,
}

/// Exact Jacobian of the model output (in `space`) at a single input,
/// one reverse pass per output coordinate. Dropout is not applied.
pub fn exact_jacobian(model: &MlpModel, x: &[f64], space: PredictionSpace) -> Result<JacobianReport> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("input must be finite".into()));
    }
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let trace = model.forward_with_draws(&xm, PerturbationDraws::none(model.num_hidden()))?;
    let mapped = space.map(trace.logits());
    let k = model.num_classes();
    let d = model.input_dim();
    let mut jacobian = Matrix::zeros(k, d);
    for out in 0..k {
        let mut e = Matrix::zeros(1, k);
        e[(0, out)] = 1.0;
        let up = space.pullback(&mapped, e);
        let g = model.backward(&trace, &up)?;
        jacobian.row_mut(out).copy_from_slice(g.input.row(0));
    }
    let relu_kinks = if model.hidden_activation() == Activation::Relu {
        trace.pre_activations()[..model.num_hidden()]
            .iter()
            .map(|z| z.as_slice().iter().filter(|&&v| v == 0.0).count())
            .sum()
    } else {
        0
    };
    let gram = jacobian.t_matmul(&jacobian)?;
    Ok(JacobianReport {
        frob_sq: jacobian.sum_sq(),
        jacobian,
        gram,
        relu_kinks,
    })
}

/// Mean of `‖J(x)‖_F²` over the rows of `x_set`.
pub fn mean_exact_frob_sq(model: &MlpModel, x_set: &Matrix, space: PredictionSpace) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..x_set.rows() {
        total += exact_jacobian(model, x_set.row(r), space)?.frob_sq;
    }
    Ok(total / x_set.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    /// Standard error across the `n_pairs` independent draws.
    pub std_error: f64,
    pub n_pairs: usize,
}

/// Monte-Carlo estimate of `E_x ‖J(x)‖_F²` over `x_set` from `n_pairs`
/// paired Gaussian input perturbations of scale `sigma`.
pub fn mc_jacobian_norm(
    model: &MlpModel,
    x_set: &Matrix,
    sigma: f64,
    n_pairs: usize,
    space: PredictionSpace,
    rng: &mut RngStream,
) -> Result<McEstimate> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    if n_pairs < 2 {
        return Err(Error::Parameter("need at least 2 pairs".into()));
    }
    let n = x_set.rows();
    if n == 0 {
        return Err(Error::Parameter("empty input set".into()));
    }
    let spec = PerturbationSpec::gaussian(sigma);
    let norm = 1.0 / (2.0 * sigma * sigma);
    // Replicate x_set so one forward pass covers many pairs.
    let pairs_per_chunk = (4096 / n).max(1);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut done = 0;
    while done < n_pairs {
        let m = pairs_per_chunk.min(n_pairs - done);
        let mut tiled = Matrix::zeros(m * n, x_set.cols());
        for p in 0..m {
            for r in 0..n {
                tiled.row_mut(p * n + r).copy_from_slice(x_set.row(r));
            }
        }
        let a = space.map(model.forward(&tiled, &spec, rng)?.logits());
        let b = space.map(model.forward(&tiled, &spec, rng)?.logits());
        for p in 0..m {
            let mut pair_mean = 0.0;
            for r in 0..n {
                let row = p * n + r;
                pair_mean += crate::matrix::sq_dist(a.row(row), b.row(row));
            }
            let v = pair_mean * norm / n as f64;
            sum += v;
            sum_sq += v * v;
        }
        done += m;
    }
    let np = n_pairs as f64;
    let mean = sum / np;
    let var = ((sum_sq - np * mean * mean) / (np - 1.0)).max(0.0);
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / np).sqrt(),
        n_pairs,
    })
}

/// Central moments of the i.i.d. entries of `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
}

impl Moments {
    pub const STANDARD_NORMAL: Moments = Moments {
        mu2: 1.0,
        mu3: 0.0,
        mu4: 3.0,
    };
}

impl Default for Moments {
    fn default() -> Self {
        Self::STANDARD_NORMAL
    }
}

/// `Var[zᵀAz] = 2μ₂²Tr(AAᵀ) + 4μ₂mᵀAm + 4μ₃mᵀAa + (μ₄ − 3μ₂²)aᵀa`
/// with `a = diag(A)` and `m = E z`. A non-symmetric `gram` is replaced by
/// `(A + Aᵀ)/2`, which leaves `zᵀAz` unchanged.
pub fn quadform_variance(gram: &Matrix, moments: Moments, m: &[f64]) -> Result<f64> {
    let d = gram.rows();
    if gram.cols() != d {
        return Err(Error::Dimension("gram must be square".into()));
    }
    if m.len() != d {
        return Err(Error::Dimension(format!("mean has {} entries, expected {d}", m.len())));
    }
    let at = gram.transpose();
    let a_mat = if gram.max_abs_diff(&at) > 0.0 {
        log::warn!("quadform_variance: asymmetric matrix symmetrized");
        let mut s = gram.clone();
        s.add_assign(&at)?;
        s.scale(0.5);
        s
    } else {
        gram.clone()
    };
    let diag: Vec<f64> = (0..d).map(|i| a_mat[(i, i)]).collect();
    let tr_aat = a_mat.sum_sq();
    let quad = |u: &[f64], v: &[f64]| -> f64 {
        (0..d)
            .map(|i| u[i] * crate::matrix::dot(a_mat.row(i), v))
            .sum()
    };
    let Moments { mu2, mu3, mu4 } = moments;
    Ok(2.0 * mu2 * mu2 * tr_aat
        + 4.0 * mu2 * quad(m, m)
        + 4.0 * mu3 * quad(m, &diag)
        + (mu4 - 3.0 * mu2 * mu2) * crate::matrix::dot(&diag, &diag))
}

/// Sample count `⌈20·ε⁻²·ln(2/δ)⌉`, a constant-explicit reading of the
/// `O(20 ε⁻² ln(2/δ))` bound for the normalized quadratic-form estimator.
/// The product is rounded to 12 significant digits before the ceiling so
/// that exact-integer cases are not pushed up by floating-point error.
pub fn sample_bound(epsilon: f64, delta: f64) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta must be in (0, 1), got {delta}")));
    }
    let raw = 20.0 / (epsilon * epsilon) * (2.0 / delta).ln();
    let mag = 10f64.powi(11 - raw.log10().floor() as i32);
    Ok(((raw * mag).round() / mag).ceil() as u64)
}

/// Everything the variance analysis reports for one Gram matrix.
#[derive(Debug, Clone)]
pub struct EstimatorVarianceReport {
    pub a: Vec<f64>,
    pub m: Vec<f64>,
    pub mu2: f64,
    pub mu4: f64,
    pub var_quadform: f64,
    pub n_required: u64,
}

pub fn estimator_variance_report(
    gram: &Matrix,
    moments: Moments,
    epsilon: f64,
    delta: f64,
) -> Result<EstimatorVarianceReport> {
    let d = gram.rows();
    let m = vec![0.0; d];
    Ok(EstimatorVarianceReport {
        a: (0..d).map(|i| gram[(i, i)]).collect(),
        var_quadform: quadform_variance(gram, moments, &m)?,
        m,
        mu2: moments.mu2,
        mu4: moments.mu4,
        n_required: sample_bound(epsilon, delta)?,
    })
}
