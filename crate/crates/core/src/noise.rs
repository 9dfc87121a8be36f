//! Class-conditional label corruption through transition matrices.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngStream;

const ROW_SUM_TOL: f64 = 1e-12;

/// Row-stochastic `K × K` matrix, `t[i][j] = p(ỹ = j | y = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    t: Matrix,
}

impl TransitionMatrix {
    pub fn new(t: Matrix) -> Result<Self> {
        if t.rows() != t.cols() || t.rows() < 2 {
            return Err(Error::Dimension(format!(
                "transition matrix must be square with K >= 2, got {:?}",
                t.shape()
            )));
        }
        for i in 0..t.rows() {
            let row = t.row(i);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Parameter(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Parameter(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { t })
    }

    pub fn k(&self) -> usize {
        self.t.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.t
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.t[(from, to)]
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Parameter(format!("eta must be in [0, 1], got {eta}")));
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {k}")));
    }
    Ok(())
}

/// Symmetric noise: keep with `1 − η`, otherwise move to one of the other
/// `K − 1` classes uniformly. The realized flip rate is exactly `η`.
pub fn uniform_noise_matrix(k: usize, eta: f64) -> Result<TransitionMatrix> {
    check_k(k)?;
    check_eta(eta)?;
    let off = eta / (k - 1) as f64;
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            t[(i, j)] = if i == j { 1.0 - eta } else { off };
        }
    }
    TransitionMatrix::new(t)
}

/// Variant where a corrupted label is resampled over all `K` classes, so
/// it may land back on the true class; the flip rate is `η(K−1)/K`.
pub fn uniform_noise_matrix_self_flip(k: usize, eta: f64) -> Result<TransitionMatrix> {
    check_k(k)?;
    check_eta(eta)?;
    let share = eta / k as f64;
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            t[(i, j)] = if i == j { 1.0 - eta + share } else { share };
        }
    }
    TransitionMatrix::new(t)
}

/// CIFAR-10 class indices that are flipped, as `(from, to)`:
/// truck→automobile, bird→airplane, deer→horse, cat↔dog.
pub const CIFAR10_FLIPS: [(usize, usize); 5] = [(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)];

pub fn cifar10_asymmetric_matrix(eta: f64) -> Result<TransitionMatrix> {
    check_eta(eta)?;
    let mut t = Matrix::identity(10);
    for (from, to) in CIFAR10_FLIPS {
        t[(from, from)] = 1.0 - eta;
        t[(from, to)] = eta;
    }
    TransitionMatrix::new(t)
}

/// Each class moves to the next one (mod K) with probability `η`.
pub fn circular_noise_matrix(k: usize, eta: f64) -> Result<TransitionMatrix> {
    check_k(k)?;
    check_eta(eta)?;
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = 1.0 - eta;
        t[(i, (i + 1) % k)] += eta;
    }
    TransitionMatrix::new(t)
}

/// Named noise families.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    None,
    Uniform { eta: f64, allow_self_flip: bool },
    Asym10 { eta: f64 },
    Circular { eta: f64 },
    Explicit(TransitionMatrix),
}

impl NoiseModel {
    pub fn transition_matrix(&self, k: usize) -> Result<TransitionMatrix> {
        let t = match self {
            NoiseModel::None => TransitionMatrix::new(Matrix::identity(k))?,
            NoiseModel::Uniform {
                eta,
                allow_self_flip: false,
            } => uniform_noise_matrix(k, *eta)?,
            NoiseModel::Uniform {
                eta,
                allow_self_flip: true,
            } => uniform_noise_matrix_self_flip(k, *eta)?,
            NoiseModel::Asym10 { eta } => cifar10_asymmetric_matrix(*eta)?,
            NoiseModel::Circular { eta } => circular_noise_matrix(k, *eta)?,
            NoiseModel::Explicit(t) => t.clone(),
        };
        if t.k() != k {
            return Err(Error::Dimension(format!(
                "noise model has {} classes, dataset has {k}",
                t.k()
            )));
        }
        Ok(t)
    }

    /// Nominal corruption rate used to size label-precision selections.
    pub fn eta(&self) -> f64 {
        match self {
            NoiseModel::None | NoiseModel::Explicit(_) => 0.0,
            NoiseModel::Uniform { eta, .. }
            | NoiseModel::Asym10 { eta }
            | NoiseModel::Circular { eta } => *eta,
        }
    }
}

/// Features with clean labels and, once corrupted, the observed noisy
/// labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub clean_labels: Vec<usize>,
    pub noisy_labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, clean_labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != clean_labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                clean_labels.len()
            )));
        }
        if let Some((index, &label)) = clean_labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= num_classes)
        {
            return Err(Error::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            clean_labels,
            noisy_labels: None,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Noisy labels if present, otherwise the clean ones.
    pub fn observed_labels(&self) -> &[usize] {
        self.noisy_labels.as_deref().unwrap_or(&self.clean_labels)
    }

    pub fn clean_mask(&self) -> Vec<bool> {
        self.clean_labels
            .iter()
            .zip(self.observed_labels())
            .map(|(a, b)| a == b)
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            clean_labels: idx.iter().map(|&i| self.clean_labels[i]).collect(),
            noisy_labels: self
                .noisy_labels
                .as_ref()
                .map(|n| idx.iter().map(|&i| n[i]).collect()),
            num_classes: self.num_classes,
        }
    }
}

/// Draws each noisy label independently from the row of `t` indexed by the
/// clean label. Features are not touched.
pub fn corrupt(
    clean: &LabeledDataset,
    t: &TransitionMatrix,
    rng: &mut RngStream,
) -> Result<LabeledDataset> {
    if t.k() != clean.num_classes {
        return Err(Error::Dimension(format!(
            "transition matrix is {}x{0} but dataset has {} classes",
            t.k(),
            clean.num_classes
        )));
    }
    let noisy = clean
        .clean_labels
        .iter()
        .map(|&y| sample_row(t.matrix().row(y), rng.uniform()))
        .collect();
    Ok(LabeledDataset {
        features: clean.features.clone(),
        clean_labels: clean.clean_labels.clone(),
        noisy_labels: Some(noisy),
        num_classes: clean.num_classes,
    })
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = j;
            acc += p;
            if u < acc {
                return j;
            }
        }
    }
    last_nonzero
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_row_stochastic(t: &TransitionMatrix) {
        for i in 0..t.k() {
            let s: f64 = t.matrix().row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    fn dataset(labels: Vec<usize>, k: usize) -> LabeledDataset {
        let n = labels.len();
        let mut features = Matrix::zeros(n, 2);
        for i in 0..n {
            features[(i, 0)] = i as f64;
            features[(i, 1)] = -(i as f64) * 0.5;
        }
        LabeledDataset::new(features, labels, k).unwrap()
    }

    #[test]
    fn zero_eta_is_identity() {
        assert_eq!(uniform_noise_matrix(4, 0.0).unwrap().matrix(), &Matrix::identity(4));
        assert_eq!(cifar10_asymmetric_matrix(0.0).unwrap().matrix(), &Matrix::identity(10));
        assert_eq!(circular_noise_matrix(5, 0.0).unwrap().matrix(), &Matrix::identity(5));
    }

    #[test]
    fn uniform_entries() {
        let t = uniform_noise_matrix(10, 0.8).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let want = if i == j { 0.2 } else { 0.8 / 9.0 };
                assert!((t.get(i, j) - want).abs() < 1e-15);
            }
        }
        assert_row_stochastic(&t);
        let s = uniform_noise_matrix_self_flip(10, 0.8).unwrap();
        assert!((s.get(0, 0) - 0.28).abs() < 1e-15);
        assert_row_stochastic(&s);
    }

    #[test]
    fn asymmetric_entries() {
        let t = cifar10_asymmetric_matrix(0.4).unwrap();
        assert_eq!(t.get(3, 5), 0.4);
        assert_eq!(t.get(3, 3), 0.6);
        assert_eq!(t.get(9, 1), 0.4);
        assert_eq!(t.get(1, 1), 1.0);
        assert_row_stochastic(&t);
    }

    #[test]
    fn circular_k3() {
        let t = circular_noise_matrix(3, 0.3).unwrap();
        let want = Matrix::from_rows(&[[0.7, 0.3, 0.0], [0.0, 0.7, 0.3], [0.3, 0.0, 0.7]]);
        assert!(t.matrix().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn circular_commutes_with_cyclic_relabeling() {
        let k = 6;
        let t = circular_noise_matrix(k, 0.35).unwrap();
        let s = |i: usize| (i + 2) % k;
        for i in 0..k {
            for j in 0..k {
                assert_eq!(t.get(s(i), s(j)), t.get(i, j));
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(uniform_noise_matrix(1, 0.1).is_err());
        assert!(uniform_noise_matrix(3, 1.5).is_err());
        assert!(cifar10_asymmetric_matrix(-0.1).is_err());
        assert!(circular_noise_matrix(4, f64::NAN).is_err());
        assert!(TransitionMatrix::new(Matrix::from_rows(&[[0.5, 0.4], [0.0, 1.0]])).is_err());
    }

    #[test]
    fn identity_corruption_keeps_labels() {
        let ds = dataset((0..50).map(|i| i % 5).collect(), 5);
        let t = NoiseModel::None.transition_matrix(5).unwrap();
        let out = corrupt(&ds, &t, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(out.observed_labels(), ds.clean_labels.as_slice());
        assert!(out.clean_mask().iter().all(|&c| c));
        assert_eq!(out.features, ds.features);
    }

    #[test]
    fn class_count_mismatch() {
        let ds = dataset(vec![0, 1, 2], 3);
        let t = uniform_noise_matrix(4, 0.2).unwrap();
        assert!(matches!(
            corrupt(&ds, &t, &mut RngStream::new(0, 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn uniform_flip_rate_concentrates() {
        let n = 10_000;
        let ds = dataset((0..n).map(|i| i % 10).collect(), 10);
        let t = uniform_noise_matrix(10, 0.4).unwrap();
        let out = corrupt(&ds, &t, &mut RngStream::new(3, 1)).unwrap();
        let flipped = out.clean_mask().iter().filter(|&&c| !c).count() as f64 / n as f64;
        let tol = 3.0 * (0.4f64 * 0.6 / n as f64).sqrt();
        assert!((flipped - 0.4).abs() <= tol, "flip fraction {flipped}");
    }

    #[test]
    fn asymmetric_flips_follow_designated_arcs_only() {
        let n = 20_000;
        let ds = dataset((0..n).map(|i| i % 10).collect(), 10);
        let t = cifar10_asymmetric_matrix(0.3).unwrap();
        let out = corrupt(&ds, &t, &mut RngStream::new(8, 0)).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for (&y, &yt) in ds.clean_labels.iter().zip(out.observed_labels()) {
            if y != yt {
                assert!(CIFAR10_FLIPS.contains(&(y, yt)), "unexpected flip {y}->{yt}");
                seen.insert((y, yt));
            }
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn corruption_is_deterministic() {
        let ds = dataset((0..200).map(|i| i % 4).collect(), 4);
        let t = uniform_noise_matrix(4, 0.5).unwrap();
        let a = corrupt(&ds, &t, &mut RngStream::new(5, 5)).unwrap();
        let b = corrupt(&ds, &t, &mut RngStream::new(5, 5)).unwrap();
        assert_eq!(a, b);
    }
}
