//! Multilayer perceptron with exact reverse-mode gradients.
//!
//! Weights are stored `(out_dim, in_dim)`, so a layer computes
//! `z = h Wᵀ + b` on a row-major batch `h`. Hidden layers apply the
//! configured activation followed by inverted dropout; the last layer is
//! linear and produces logits.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngStream;
use crate::variance_reg::PerturbationSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at `z`; relu uses the subgradient 0 at the kink.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Parameter(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
    hidden_activation: Activation,
    dropout_rate: f64,
}

impl MlpModel {
    /// He-style uniform init: each weight is uniform with standard deviation
    /// `sqrt(2 / fan_in)`; biases start at zero.
    pub fn new(
        layer_dims: &[usize],
        hidden_activation: Activation,
        dropout_rate: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        validate_dims(layer_dims, dropout_rate)?;
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut m = Matrix::zeros(fan_out, fan_in);
            for v in m.as_mut_slice() {
                *v = (2.0 * rng.uniform() - 1.0) * bound;
            }
            weights.push(m);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation,
            dropout_rate,
        })
    }

    /// Builds a model from explicit parameters. `weights[l]` is
    /// `(layer_dims[l+1], layer_dims[l])` and `biases[l]` has
    /// `layer_dims[l+1]` entries.
    pub fn from_parts(
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        hidden_activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Dimension(
                "need one bias vector per weight matrix".into(),
            ));
        }
        let mut layer_dims = vec![weights[0].cols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *layer_dims.last().unwrap() {
                return Err(Error::Dimension(format!(
                    "layer {l} expects input {} but previous layer outputs {}",
                    w.cols(),
                    layer_dims.last().unwrap()
                )));
            }
            if b.len() != w.rows() {
                return Err(Error::Dimension(format!(
                    "layer {l} bias has {} entries, expected {}",
                    b.len(),
                    w.rows()
                )));
            }
            layer_dims.push(w.rows());
        }
        validate_dims(&layer_dims, dropout_rate)?;
        let biases = biases
            .into_iter()
            .map(|b| {
                let n = b.len();
                Matrix::from_vec(1, n, b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layer_dims,
            weights,
            biases,
            hidden_activation,
            dropout_rate,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_hidden(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    /// Parameters in the fixed order `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.as_slice().len()).sum()
    }

    /// Draws perturbations from `spec` and runs a forward pass.
    pub fn forward(
        &self,
        x: &Matrix,
        spec: &PerturbationSpec,
        rng: &mut RngStream,
    ) -> Result<ForwardTrace> {
        let draws = self.sample_draws(x.rows(), spec, rng)?;
        self.forward_with_draws(x, draws)
    }

    /// Deterministic forward pass: no input noise, dropout off.
    pub fn forward_eval(&self, x: &Matrix) -> Result<ForwardTrace> {
        self.forward_with_draws(x, PerturbationDraws::none(self.num_hidden()))
    }

    pub fn predict_logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_eval(x)?.into_logits())
    }

    pub fn sample_draws(
        &self,
        batch: usize,
        spec: &PerturbationSpec,
        rng: &mut RngStream,
    ) -> Result<PerturbationDraws> {
        spec.validate()?;
        let input_noise = (spec.gaussian_sigma > 0.0).then(|| {
            let mut m = Matrix::zeros(batch, self.input_dim());
            for v in m.as_mut_slice() {
                *v = spec.gaussian_sigma * rng.normal();
            }
            m
        });
        let p = self.dropout_rate;
        let dropout_masks = (0..self.num_hidden())
            .map(|l| {
                (spec.dropout_on && p > 0.0).then(|| {
                    let keep = 1.0 / (1.0 - p);
                    let mut m = Matrix::zeros(batch, self.layer_dims[l + 1]);
                    for v in m.as_mut_slice() {
                        *v = if rng.uniform() < p { 0.0 } else { keep };
                    }
                    m
                })
            })
            .collect();
        Ok(PerturbationDraws {
            input_noise,
            dropout_masks,
        })
    }

    /// Forward pass with the given perturbation draws held fixed.
    pub fn forward_with_draws(&self, x: &Matrix, draws: PerturbationDraws) -> Result<ForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if draws.dropout_masks.len() != self.num_hidden() {
            return Err(Error::Dimension("dropout mask count != hidden layers".into()));
        }
        let mut h = match &draws.input_noise {
            Some(noise) => {
                if noise.shape() != x.shape() {
                    return Err(Error::Dimension("input noise shape != input shape".into()));
                }
                let mut h = x.clone();
                h.add_assign(noise)?;
                h
            }
            None => x.clone(),
        };
        let n_layers = self.num_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut z = h.matmul_t(&self.weights[l])?;
            let b = self.biases[l].as_slice();
            for r in 0..z.rows() {
                for (v, bv) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
            if !z.is_finite() {
                return Err(Error::NumericOverflow { layer: l });
            }
            inputs.push(h);
            h = if l + 1 < n_layers {
                let mut a = z.map(|v| self.hidden_activation.apply(v));
                if let Some(mask) = &draws.dropout_masks[l] {
                    if mask.shape() != a.shape() {
                        return Err(Error::Dimension(format!("dropout mask {l} shape")));
                    }
                    for (v, m) in a.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *v *= m;
                    }
                }
                a
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok(ForwardTrace {
            layer_dims: self.layer_dims.clone(),
            inputs,
            pre,
            logits: h,
            draws,
        })
    }

    /// Hidden representation after `layer` hidden layers (0 is the input),
    /// computed without perturbation.
    pub fn features(&self, x: &Matrix, layer: usize) -> Result<Matrix> {
        if layer > self.num_hidden() {
            return Err(Error::Parameter(format!(
                "feature layer {layer} exceeds hidden layer count {}",
                self.num_hidden()
            )));
        }
        let mut trace = self.forward_eval(x)?;
        Ok(trace.inputs.swap_remove(layer))
    }

    /// Reverse-mode pass. Draws recorded in `trace` are constants.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Matrix) -> Result<Gradients> {
        if trace.layer_dims != self.layer_dims || trace.pre.len() != self.num_layers() {
            return Err(Error::State(
                "trace was not produced by a model with this architecture".into(),
            ));
        }
        if d_logits.shape() != trace.logits.shape() {
            return Err(Error::State(format!(
                "upstream gradient {:?} does not match logits {:?}",
                d_logits.shape(),
                trace.logits.shape()
            )));
        }
        let n_layers = self.num_layers();
        let mut weights = vec![Matrix::zeros(0, 0); n_layers];
        let mut biases = vec![Matrix::zeros(0, 0); n_layers];
        let mut g = d_logits.clone();
        for l in (0..n_layers).rev() {
            weights[l] = g.t_matmul(&trace.inputs[l])?;
            let mut db = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (acc, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            biases[l] = db;
            let mut dh = g.matmul(&self.weights[l])?;
            if l > 0 {
                if let Some(mask) = &trace.draws.dropout_masks[l - 1] {
                    for (v, m) in dh.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *v *= m;
                    }
                }
                let act = self.hidden_activation;
                for (v, &z) in dh.as_mut_slice().iter_mut().zip(trace.pre[l - 1].as_slice()) {
                    *v *= act.derivative(z);
                }
            }
            g = dh;
        }
        Ok(Gradients {
            weights,
            biases,
            input: g,
        })
    }
}

fn validate_dims(layer_dims: &[usize], dropout_rate: f64) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Parameter("need at least input and output dims".into()));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Parameter("layer dims must be positive".into()));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Parameter(format!(
            "dropout rate {dropout_rate} outside [0, 1)"
        )));
    }
    Ok(())
}

/// The random quantities of one stochastic forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDraws {
    pub input_noise: Option<Matrix>,
    /// Per hidden layer; entries are 0 or `1 / (1 - p)`.
    pub dropout_masks: Vec<Option<Matrix>>,
}

impl PerturbationDraws {
    pub fn none(num_hidden: usize) -> Self {
        Self {
            input_noise: None,
            dropout_masks: vec![None; num_hidden],
        }
    }
}

/// Activations retained by a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layer_dims: Vec<usize>,
    /// Input to each layer; `inputs[0]` is the perturbed batch.
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    logits: Matrix,
    draws: PerturbationDraws,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn into_logits(self) -> Matrix {
        self.logits
    }

    pub fn draws(&self) -> &PerturbationDraws {
        &self.draws
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

/// Gradients shaped like the model parameters, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub input: Matrix,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel, batch: usize) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model
                .biases
                .iter()
                .map(|b| Matrix::zeros(1, b.cols()))
                .collect(),
            input: Matrix::zeros(batch, model.input_dim()),
        }
    }

    /// Same order as [`MlpModel::params`].
    pub fn params(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.add_assign(b)?;
        }
        self.input.add_assign(&other.input)
    }

    pub fn is_zero(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.as_slice().iter().all(|&v| v == 0.0))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NRCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a little-endian binary checkpoint:
/// magic `NRCK`, version `u32`, layer count `u32`, dims as `u64`,
/// activation tag `u8`, dropout `f64`, then each layer's weights
/// (row-major) followed by its biases, all `f64`.
pub fn write_checkpoint<W: Write>(model: &MlpModel, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(model.layer_dims.len() as u32)?;
    for &d in &model.layer_dims {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    w.write_u8(model.hidden_activation.tag())?;
    w.write_f64::<LittleEndian>(model.dropout_rate)?;
    for p in model.params() {
        for &v in p.as_slice() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<MlpModel> {
    let mut r = CountingReader { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| r.format(e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| r.format(e))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let n_dims = r.read_u32::<LittleEndian>().map_err(|e| r.format(e))? as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(Error::Format {
            offset: 8,
            msg: format!("implausible layer count {n_dims}"),
        });
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(r.read_u64::<LittleEndian>().map_err(|e| r.format(e))? as usize);
    }
    let tag_offset = r.offset;
    let tag = r.read_u8().map_err(|e| r.format(e))?;
    let activation = Activation::from_tag(tag).ok_or_else(|| Error::Format {
        offset: tag_offset,
        msg: format!("unknown activation tag {tag}"),
    })?;
    let dropout = r.read_f64::<LittleEndian>().map_err(|e| r.format(e))?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in dims.windows(2) {
        let mut wm = Matrix::zeros(w[1], w[0]);
        for v in wm.as_mut_slice() {
            *v = r.read_f64::<LittleEndian>().map_err(|e| r.format(e))?;
        }
        let mut b = vec![0.0; w[1]];
        for v in &mut b {
            *v = r.read_f64::<LittleEndian>().map_err(|e| r.format(e))?;
        }
        weights.push(wm);
        biases.push(b);
    }
    MlpModel::from_parts(weights, biases, activation, dropout)
}

/// Tracks the byte offset so format errors can name it.
pub(crate) struct CountingReader<R> {
    pub inner: R,
    pub offset: u64,
}

impl<R> CountingReader<R> {
    pub fn format(&self, e: std::io::Error) -> Error {
        Error::Format {
            offset: self.offset,
            msg: e.to_string(),
        }
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}
