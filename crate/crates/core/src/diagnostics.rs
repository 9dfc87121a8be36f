//! Generalization diagnostics: local intrinsic dimensionality, critical
//! sample ratio, and label precision.

use crate::error::{Error, Result};
use crate::loss::argmax;
use crate::matrix::{sq_dist, Matrix};
use crate::mlp::MlpModel;
use crate::rng::RngStream;

/// MLE of local intrinsic dimensionality from neighbor distances:
///
/// ```text
/// LID(x) = −( (1/k) Σᵢ ln(rᵢ / r_max) )⁻¹
/// ```
///
/// over the `k` smallest distances, with `r_max` the k-th smallest.
pub fn lid_from_distances(distances: &[f64], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Parameter(format!("k must be >= 2, got {k}")));
    }
    if distances.len() < k {
        return Err(Error::Parameter(format!(
            "need {k} neighbors, got {}",
            distances.len()
        )));
    }
    let mut d = distances.to_vec();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("non-finite distance".into()));
    }
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    let nearest = &mut d[..k];
    // fixed summation order keeps the estimate independent of input order
    nearest.sort_unstable_by(f64::total_cmp);
    let r_max = nearest.iter().copied().fold(0.0, f64::max);
    if nearest.iter().any(|&r| r <= 0.0) {
        return Err(Error::DegenerateGeometry(
            "zero distance to a neighbor (duplicate point)".into(),
        ));
    }
    let s: f64 = nearest.iter().map(|r| (r / r_max).ln()).sum();
    if s == 0.0 {
        return Err(Error::InfiniteLid);
    }
    Ok(-(k as f64) / s)
}

/// LID of `x` against a neighbor set (rows of `neighbors`, not containing
/// `x`), with Euclidean distance.
pub fn lid_mle(x: &[f64], neighbors: &Matrix, k: usize) -> Result<f64> {
    if neighbors.cols() != x.len() {
        return Err(Error::Dimension(format!(
            "point has dim {}, neighbors have {}",
            x.len(),
            neighbors.cols()
        )));
    }
    let d: Vec<f64> = (0..neighbors.rows())
        .map(|r| sq_dist(x, neighbors.row(r)).sqrt())
        .collect();
    lid_from_distances(&d, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidConfig {
    pub k: usize,
    pub batch_size: usize,
    /// Hidden layer whose activations are embedded; `None` picks the last
    /// hidden layer (the input to the output layer).
    pub feature_layer: Option<usize>,
}

impl Default for LidConfig {
    fn default() -> Self {
        Self {
            k: 20,
            batch_size: 128,
            feature_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidEstimate {
    pub per_point: Vec<f64>,
    pub mean: f64,
    /// Points dropped because their neighborhood was degenerate.
    pub skipped: usize,
}

/// Embeds the batch with the model's feature map and estimates LID of each
/// point against the rest of the batch.
pub fn lid_batch(model: &MlpModel, x_batch: &Matrix, cfg: &LidConfig) -> Result<LidEstimate> {
    if cfg.k < 2 || x_batch.rows() <= cfg.k {
        return Err(Error::Parameter(format!(
            "batch of {} cannot support k = {}",
            x_batch.rows(),
            cfg.k
        )));
    }
    let layer = cfg.feature_layer.unwrap_or(model.num_hidden());
    let g = model.features(x_batch, layer)?;
    lid_of_embedding(&g, cfg.k)
}

/// Mean LID over consecutive batches of `x`, up to `max_batches` of them.
/// Falls back to one batch of everything when `x` is smaller than a batch
/// but larger than `k`, and to NaN when it is not even that.
pub fn mean_lid_over_batches(
    model: &MlpModel,
    x: &Matrix,
    cfg: &LidConfig,
    max_batches: usize,
) -> Result<f64> {
    let n = x.rows();
    let full = (n / cfg.batch_size).min(max_batches);
    let batches: Vec<Vec<usize>> = if full > 0 {
        (0..full)
            .map(|b| (b * cfg.batch_size..(b + 1) * cfg.batch_size).collect())
            .collect()
    } else if n > cfg.k {
        vec![(0..n).collect()]
    } else {
        return Ok(f64::NAN);
    };
    let mut total = 0.0;
    for idx in &batches {
        total += lid_batch(model, &x.select_rows(idx), cfg)?.mean;
    }
    Ok(total / batches.len() as f64)
}

/// Per-point LID within an already embedded batch, excluding self.
pub fn lid_of_embedding(g: &Matrix, k: usize) -> Result<LidEstimate> {
    let n = g.rows();
    let mut per_point = Vec::with_capacity(n);
    let mut skipped = 0;
    let mut dists = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        dists.clear();
        dists.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(g.row(i), g.row(j)).sqrt()),
        );
        match lid_from_distances(&dists, k) {
            Ok(v) => per_point.push(v),
            Err(Error::DegenerateGeometry(_) | Error::InfiniteLid) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if per_point.is_empty() {
        return Err(Error::UndefinedMetric("every point in the batch was degenerate".into()));
    }
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(LidEstimate {
        per_point,
        mean,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsrConfig {
    /// Half-width of the L∞ box around each point.
    pub radius: f64,
    pub probes: usize,
    /// Step of the gradient-sign probes; `None` means `radius / 5`.
    pub step: Option<f64>,
}

impl Default for CsrConfig {
    fn default() -> Self {
        Self {
            radius: 0.5,
            probes: 10,
            step: None,
        }
    }
}

/// Fraction of points whose predicted class changes somewhere in the L∞
/// box of `cfg.radius` around them.
///
/// The search alternates two probe kinds, `cfg.probes` in total: even
/// attempts take a signed-gradient step that shrinks the gap between the
/// originally predicted class and the strongest competitor (projected back
/// into the box), odd attempts draw a uniform point in the box. Finding no
/// flip does not prove none exists, so the result is a lower bound.
pub fn critical_sample_ratio(
    model: &MlpModel,
    x_batch: &Matrix,
    cfg: &CsrConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(cfg.radius > 0.0 && cfg.radius.is_finite()) {
        return Err(Error::Parameter(format!("radius must be > 0, got {}", cfg.radius)));
    }
    if cfg.probes == 0 {
        return Err(Error::Parameter("probes must be >= 1".into()));
    }
    let n = x_batch.rows();
    if n == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let r = cfg.radius;
    let step = cfg.step.unwrap_or(r / 5.0);
    let k = model.num_classes();
    let base = model.predict_logits(x_batch)?;
    let original: Vec<usize> = (0..n).map(|i| argmax(base.row(i))).collect();
    let mut critical = vec![false; n];
    let mut walker = x_batch.clone();

    for attempt in 0..cfg.probes {
        let probe = if attempt % 2 == 0 {
            let trace = model.forward_eval(&walker)?;
            let logits = trace.logits();
            let mut up = Matrix::zeros(n, k);
            for i in 0..n {
                let c = original[i];
                let row = logits.row(i);
                let rival = (0..k)
                    .filter(|&j| j != c)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
                if let Some(j) = rival {
                    up[(i, c)] = 1.0;
                    up[(i, j)] = -1.0;
                }
            }
            let g = model.backward(&trace, &up)?.input;
            for i in 0..n {
                let x0 = x_batch.row(i);
                let gi = g.row(i).to_vec();
                for ((w, &o), gv) in walker.row_mut(i).iter_mut().zip(x0).zip(gi) {
                    let moved = *w - step * sign(gv);
                    *w = moved.clamp(o - r, o + r);
                }
            }
            walker.clone()
        } else {
            let mut p = x_batch.clone();
            for v in p.as_mut_slice() {
                *v += r * (2.0 * rng.uniform() - 1.0);
            }
            p
        };
        let out = model.predict_logits(&probe)?;
        for i in 0..n {
            if argmax(out.row(i)) != original[i] {
                critical[i] = true;
            }
        }
    }
    Ok(critical.iter().filter(|&&c| c).count() as f64 / n as f64)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Among the `⌊N(1−η)⌋` examples with the smallest loss (ties by index),
/// the fraction whose label is clean.
pub fn label_precision(train_losses: &[f64], clean_mask: &[bool], eta: f64) -> Result<f64> {
    if train_losses.len() != clean_mask.len() {
        return Err(Error::Dimension(format!(
            "{} losses but {} mask entries",
            train_losses.len(),
            clean_mask.len()
        )));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Parameter(format!("eta must be in [0, 1), got {eta}")));
    }
    if train_losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("losses must be finite".into()));
    }
    let n = train_losses.len();
    // guard against 1 − η being a hair under its decimal value
    let n_sel = ((n as f64) * (1.0 - eta) + 1e-9).floor() as usize;
    if n_sel == 0 {
        return Err(Error::UndefinedMetric("label precision selects no examples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| train_losses[a].total_cmp(&train_losses[b]).then(a.cmp(&b)));
    let clean = order[..n_sel].iter().filter(|&&i| clean_mask[i]).count();
    Ok(clean as f64 / n_sel as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;

    #[test]
    fn geometric_distances_formula() {
        let k = 4;
        let d: Vec<f64> = (1..=k).map(|i| 2.0 * i as f64 / k as f64).collect();
        let lid = lid_from_distances(&d, k).unwrap();
        let want = 4.0 / (32.0f64 / 3.0).ln();
        assert!((lid - want).abs() < 1e-12);
        assert!((lid - 1.690).abs() < 1e-3);
    }

    #[test]
    fn uses_only_k_nearest() {
        let d = [0.5, 1.0, 1.5, 2.0, 100.0, 3.0];
        let a = lid_from_distances(&d, 4).unwrap();
        let b = lid_from_distances(&[2.0, 1.5, 1.0, 0.5], 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_cases() {
        assert!(matches!(
            lid_from_distances(&[0.0, 1.0, 2.0], 3),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            lid_from_distances(&[1.0, 1.0, 1.0], 3),
            Err(Error::InfiniteLid)
        ));
        assert!(lid_from_distances(&[1.0, 2.0], 3).is_err());
        assert!(lid_from_distances(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn lid_mle_matches_distance_form() {
        let x = [0.0, 0.0];
        let nb = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 4.0], [0.5, 0.5]]);
        let d = [1.0, 2.0, 5.0, 0.5f64.hypot(0.5)];
        assert_eq!(lid_mle(&x, &nb, 3).unwrap(), lid_from_distances(&d, 3).unwrap());
    }

    fn threshold_model() -> MlpModel {
        // logits (x, −x): class 0 for x >= 0, class 1 for x < 0
        MlpModel::from_parts(
            vec![Matrix::from_rows(&[[1.0], [-1.0]])],
            vec![vec![0.0, 0.0]],
            Activation::Relu,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn csr_threshold_geometry() {
        let r = 0.4;
        let x = Matrix::from_rows(&[[2.0 * r], [-2.0 * r], [r / 2.0], [-r / 2.0]]);
        let cfg = CsrConfig {
            radius: r,
            probes: 10,
            step: None,
        };
        let csr = critical_sample_ratio(&threshold_model(), &x, &cfg, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(csr, 0.5);
    }

    #[test]
    fn csr_constant_model_is_zero() {
        let model = MlpModel::from_parts(
            vec![Matrix::zeros(3, 2)],
            vec![vec![0.0, 1.0, 0.0]],
            Activation::Relu,
            0.0,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[0.0, 0.0], [5.0, -3.0], [0.1, 0.2]]);
        let cfg = CsrConfig {
            radius: 10.0,
            ..Default::default()
        };
        assert_eq!(critical_sample_ratio(&model, &x, &cfg, &mut RngStream::new(0, 0)).unwrap(), 0.0);
    }

    #[test]
    fn csr_rejects_bad_config() {
        let x = Matrix::zeros(1, 1);
        let mut rng = RngStream::new(0, 0);
        let m = threshold_model();
        assert!(critical_sample_ratio(&m, &x, &CsrConfig { radius: 0.0, ..Default::default() }, &mut rng).is_err());
        assert!(critical_sample_ratio(&m, &x, &CsrConfig { probes: 0, ..Default::default() }, &mut rng).is_err());
    }

    #[test]
    fn precision_perfect_separation() {
        let losses = [0.1, 5.0, 0.2, 6.0, 0.3];
        let mask = [true, false, true, false, true];
        assert_eq!(label_precision(&losses, &mask, 0.4).unwrap(), 1.0);
    }

    #[test]
    fn precision_zero_eta_selects_all() {
        let losses = [3.0, 1.0, 2.0];
        assert_eq!(label_precision(&losses, &[true; 3], 0.0).unwrap(), 1.0);
        let p = label_precision(&losses, &[true, false, true], 0.0).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn precision_ties_by_index() {
        let losses = [1.0, 1.0, 1.0, 1.0];
        let mask = [false, true, true, true];
        // selects indices 0 and 1
        assert_eq!(label_precision(&losses, &mask, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn precision_errors() {
        assert!(matches!(
            label_precision(&[1.0], &[true], 0.5),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(label_precision(&[1.0, 2.0], &[true, true], 1.0).is_err());
        assert!(label_precision(&[1.0, f64::NAN], &[true, true], 0.0).is_err());
    }
}
