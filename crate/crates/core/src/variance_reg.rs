//! The stochastic variance regularizer and the combined training objective.
//!
//! For a batch `x₁..x_N` and two independent perturbation draws `ξ, ξ′`,
//!
//! ```text
//! R̂_V = (1/N) Σᵢ ‖f(xᵢ; θ, ξ′ᵢ) − f(xᵢ; θ, ξᵢ)‖²
//! ```
//!
//! Its expectation over the draws is `(2/N) Σᵢ Σₖ Var_ξ[f(xᵢ; θ, ξ)]ₖ`, the
//! summed per-output predictive variance. The training loss adds
//! `λ(epoch)·R̂_V` to the cross-entropy of the ξ pass, so every step costs
//! exactly two forward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{softmax, softmax_cross_entropy};
use crate::matrix::Matrix;
use crate::mlp::{ForwardTrace, Gradients, MlpModel};
use crate::rng::RngStream;

/// Distribution of the per-pass perturbation ξ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Standard deviation of additive Gaussian input noise.
    pub gaussian_sigma: f64,
    /// Whether the model's dropout is active during the stochastic passes.
    pub dropout_on: bool,
}

impl PerturbationSpec {
    pub const NONE: PerturbationSpec = PerturbationSpec {
        gaussian_sigma: 0.0,
        dropout_on: false,
    };

    pub fn gaussian(sigma: f64) -> Self {
        Self {
            gaussian_sigma: sigma,
            dropout_on: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gaussian_sigma.is_finite() || self.gaussian_sigma < 0.0 {
            return Err(Error::Parameter(format!(
                "gaussian_sigma must be finite and >= 0, got {}",
                self.gaussian_sigma
            )));
        }
        Ok(())
    }

    /// True when a forward pass under this spec is deterministic for `model`.
    pub fn is_null_for(&self, model: &MlpModel) -> bool {
        self.gaussian_sigma == 0.0 && (!self.dropout_on || model.dropout_rate() == 0.0)
    }
}

/// Output space in which the two passes are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionSpace {
    Logits,
    #[default]
    Probabilities,
}

impl std::str::FromStr for PredictionSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(Self::Logits),
            "probabilities" => Ok(Self::Probabilities),
            other => Err(Error::Parameter(format!("unknown prediction space '{other}'"))),
        }
    }
}

impl PredictionSpace {
    pub fn map(self, logits: &Matrix) -> Matrix {
        match self {
            Self::Logits => logits.clone(),
            Self::Probabilities => softmax(logits),
        }
    }

    /// Pulls an upstream gradient in this space back to the logits.
    /// `mapped` is the output of [`PredictionSpace::map`].
    pub fn pullback(self, mapped: &Matrix, upstream: Matrix) -> Matrix {
        match self {
            Self::Logits => upstream,
            Self::Probabilities => {
                let mut out = upstream;
                for r in 0..out.rows() {
                    let p = mapped.row(r);
                    let gp: f64 = out.row(r).iter().zip(p).map(|(g, p)| g * p).sum();
                    for (g, &pv) in out.row_mut(r).iter_mut().zip(p) {
                        *g = pv * (*g - gp);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda_max: f64,
    pub rampup_epochs: usize,
    pub prediction_space: PredictionSpace,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda_max: 0.0,
            rampup_epochs: 5,
            prediction_space: PredictionSpace::Probabilities,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_max.is_finite() || self.lambda_max < 0.0 {
            return Err(Error::Parameter(format!(
                "lambda_max must be finite and >= 0, got {}",
                self.lambda_max
            )));
        }
        Ok(())
    }
}

/// Regularizer weight at `epoch`: `λ·exp(−5(1 − t/T)²)` with `t` clamped to
/// `T`; plain `λ` when `T = 0`.
pub fn lambda_at(epoch: usize, cfg: &RegularizerConfig) -> f64 {
    if cfg.rampup_epochs == 0 {
        return cfg.lambda_max;
    }
    let t = epoch.min(cfg.rampup_epochs) as f64 / cfg.rampup_epochs as f64;
    cfg.lambda_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// Value of R̂_V for two finished passes, and its gradient with respect to
/// each pass's logits.
pub fn rv_from_logits(
    logits_xi: &Matrix,
    logits_xi_prime: &Matrix,
    space: PredictionSpace,
) -> Result<(f64, Matrix, Matrix)> {
    logits_xi.check_same_shape(logits_xi_prime)?;
    let n = logits_xi.rows();
    if n == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let fa = space.map(logits_xi);
    let fb = space.map(logits_xi_prime);
    let diff = fa.zip_map(&fb, |a, b| a - b)?;
    let value = diff.sum_sq() / n as f64;
    let mut d = diff;
    d.scale(2.0 / n as f64);
    let mut neg = d.clone();
    neg.scale(-1.0);
    let ga = space.pullback(&fa, d);
    let gb = space.pullback(&fb, neg);
    Ok((value, ga, gb))
}

#[derive(Debug, Clone)]
pub struct RvHat {
    pub value: f64,
    /// Gradient of R̂_V through both passes.
    pub gradients: Gradients,
    /// Set when the perturbation is null, making both passes identical.
    pub degenerate: bool,
}

/// Two independent stochastic passes and the squared difference of their
/// predictions, averaged over the batch. Never looks at labels.
pub fn r_v_hat(
    model: &MlpModel,
    x: &Matrix,
    perturb: &PerturbationSpec,
    space: PredictionSpace,
    rng: &mut RngStream,
) -> Result<RvHat> {
    if x.rows() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    perturb.validate()?;
    if perturb.is_null_for(model) {
        log::warn!("degenerate perturbation: sigma = 0 and dropout off, R_V is identically 0");
        return Ok(RvHat {
            value: 0.0,
            gradients: Gradients::zeros_like(model, x.rows()),
            degenerate: true,
        });
    }
    let ta = model.forward(x, perturb, rng)?;
    let tb = model.forward(x, perturb, rng)?;
    let (value, ga, gb) = rv_from_logits(ta.logits(), tb.logits(), space)?;
    Ok(RvHat {
        value,
        gradients: backward_pair(model, &ta, &ga, &tb, &gb)?,
        degenerate: false,
    })
}

fn backward_pair(
    model: &MlpModel,
    ta: &ForwardTrace,
    ga: &Matrix,
    tb: &ForwardTrace,
    gb: &Matrix,
) -> Result<Gradients> {
    let mut g = model.backward(ta, ga)?;
    g.accumulate(&model.backward(tb, gb)?)?;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveComponents {
    pub ce: f64,
    pub rv: f64,
    pub lambda_eff: f64,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub gradients: Gradients,
    pub components: ObjectiveComponents,
    /// The ξ-pass logits that fed the cross-entropy term.
    pub logits: Matrix,
}

/// `CE(ξ-pass, ỹ) + λ(epoch)·R̂_V` with exact gradients.
#[allow(clippy::too_many_arguments)]
pub fn combined_objective(
    model: &MlpModel,
    x: &Matrix,
    noisy_labels: &[usize],
    perturb: &PerturbationSpec,
    cfg: &RegularizerConfig,
    epoch: usize,
    rng: &mut RngStream,
) -> Result<Objective> {
    perturb.validate()?;
    cfg.validate()?;
    let ta = model.forward(x, perturb, rng)?;
    let tb = model.forward(x, perturb, rng)?;
    objective_from_traces(model, &ta, &tb, noisy_labels, cfg.prediction_space, lambda_at(epoch, cfg))
}

/// Objective for two passes whose draws are already fixed.
pub fn objective_from_traces(
    model: &MlpModel,
    trace_xi: &ForwardTrace,
    trace_xi_prime: &ForwardTrace,
    noisy_labels: &[usize],
    space: PredictionSpace,
    lambda_eff: f64,
) -> Result<Objective> {
    let (ce, d_ce) = softmax_cross_entropy(trace_xi.logits(), noisy_labels)?;
    let (rv, ga, gb) = rv_from_logits(trace_xi.logits(), trace_xi_prime.logits(), space)?;
    let gradients = if lambda_eff > 0.0 {
        let mut da = ga;
        da.scale(lambda_eff);
        da.add_assign(&d_ce)?;
        let mut db = gb;
        db.scale(lambda_eff);
        backward_pair(model, trace_xi, &da, trace_xi_prime, &db)?
    } else {
        model.backward(trace_xi, &d_ce)?
    };
    Ok(Objective {
        loss: ce + lambda_eff * rv,
        gradients,
        components: ObjectiveComponents { ce, rv, lambda_eff },
        logits: trace_xi.logits().clone(),
    })
}
