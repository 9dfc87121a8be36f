use noisereg::diagnostics::{critical_sample_ratio, label_precision, lid_batch, lid_of_embedding, CsrConfig, LidConfig};
use noisereg::jacobian::{mc_jacobian_norm, mean_exact_frob_sq, quadform_variance, Moments};
use noisereg::mlp::{Activation, MlpModel};
use noisereg::noise::{corrupt, LabeledDataset, NoiseModel};
use noisereg::variance_reg::{r_v_hat, PerturbationSpec, PredictionSpace};
use noisereg::{Matrix, RngStream};

fn linear(a: Matrix) -> MlpModel {
    let k = a.rows();
    MlpModel::from_parts(vec![a], vec![vec![0.0; k]], Activation::Relu, 0.0).unwrap()
}

fn random_matrix(r: usize, c: usize, rng: &mut RngStream) -> Matrix {
    let mut m = Matrix::zeros(r, c);
    for v in m.as_mut_slice() {
        *v = rng.normal();
    }
    m
}

#[test]
fn rv_hat_over_two_sigma_sq_recovers_frobenius_norm() {
    let model = linear(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let sigma = 0.01;
    let mut x = Matrix::zeros(200_000, 2);
    for r in 0..x.rows() {
        x.row_mut(r).copy_from_slice(&[0.2, -1.1]);
    }
    let mut rng = RngStream::new(9, 0);
    let rv = r_v_hat(&model, &x, &PerturbationSpec::gaussian(sigma), PredictionSpace::Logits, &mut rng).unwrap();
    let est = rv.value / (2.0 * sigma * sigma);
    assert!((est - 30.0).abs() < 0.3, "{est}");
}

#[test]
fn mc_estimate_tracks_exact_norm_on_nonlinear_net() {
    let mut rng = RngStream::new(12, 0);
    let model = MlpModel::new(&[3, 12, 12, 4], Activation::Tanh, 0.0, &mut rng).unwrap();
    let x = random_matrix(16, 3, &mut rng);
    for space in [PredictionSpace::Logits, PredictionSpace::Probabilities] {
        let exact = mean_exact_frob_sq(&model, &x, space).unwrap();
        let est = mc_jacobian_norm(&model, &x, 1e-3, 50_000, space, &mut rng).unwrap();
        let tol = (3.0 * est.std_error).max(0.01 * exact);
        assert!((est.estimate - exact).abs() <= tol, "{space:?}: {} vs {exact}", est.estimate);
    }
}

#[test]
fn curvature_bias_shrinks_with_sigma() {
    let mut rng = RngStream::new(13, 0);
    let model = MlpModel::new(&[2, 16, 3], Activation::Tanh, 0.0, &mut rng).unwrap();
    let x = random_matrix(8, 2, &mut rng);
    let exact = mean_exact_frob_sq(&model, &x, PredictionSpace::Logits).unwrap();
    let gap = |sigma: f64| {
        let mut rng = RngStream::new(14, 0);
        let e = mc_jacobian_norm(&model, &x, sigma, 200_000, PredictionSpace::Logits, &mut rng).unwrap();
        (e.estimate - exact).abs() / exact
    };
    let wide = gap(1.0);
    let narrow = gap(1e-3);
    assert!(narrow < wide, "{narrow} !< {wide}");
    assert!(narrow < 0.01);
}

#[test]
fn quadform_variance_matches_simulation_with_mean_shift() {
    let a = Matrix::from_rows(&[[1.0, 0.5, 0.0], [0.5, 2.0, -0.3], [0.0, -0.3, 0.7]]);
    let m = [0.4, -0.2, 1.0];
    let formula = quadform_variance(&a, Moments::STANDARD_NORMAL, &m).unwrap();
    let mut rng = RngStream::new(3, 0);
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z: Vec<f64> = m.iter().map(|mi| mi + rng.normal()).collect();
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += z[i] * a[(i, j)] * z[j];
            }
        }
        s += q;
        s2 += q * q;
    }
    let nf = n as f64;
    let var = (s2 - s * s / nf) / (nf - 1.0);
    assert!((var - formula).abs() / formula < 0.02, "{var} vs {formula}");
}

#[test]
fn quadform_variance_is_twice_trace_of_square_for_standard_normal() {
    let mut rng = RngStream::new(4, 0);
    let a = random_matrix(5, 5, &mut rng);
    let sym = Matrix::from_vec(
        5,
        5,
        (0..25).map(|i| 0.5 * (a[(i / 5, i % 5)] + a[(i % 5, i / 5)])).collect(),
    )
    .unwrap();
    let tr = sym.matmul_t(&sym).unwrap().trace();
    let v = quadform_variance(&sym, Moments::STANDARD_NORMAL, &[0.0; 5]).unwrap();
    assert!((v - 2.0 * tr).abs() < 1e-10 * tr);
}

#[test]
fn transition_frequencies_match_matrix() {
    let n = 50_000;
    let k = 10;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let ds = LabeledDataset::new(Matrix::zeros(n, 1), labels, k).unwrap();
    for noise in [
        NoiseModel::Uniform { eta: 0.4, allow_self_flip: false },
        NoiseModel::Asym10 { eta: 0.3 },
        NoiseModel::Circular { eta: 0.2 },
    ] {
        let t = noise.transition_matrix(k).unwrap();
        let mut rng = RngStream::new(8, 0);
        let noisy = corrupt(&ds, &t, &mut rng).unwrap();
        let mut counts = vec![vec![0usize; k]; k];
        for (c, o) in noisy.clean_labels.iter().zip(noisy.observed_labels()) {
            counts[*c][*o] += 1;
        }
        for (i, row) in counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            for (j, &cnt) in row.iter().enumerate() {
                let p = t.get(i, j);
                let freq = cnt as f64 / total as f64;
                let sd = (p * (1.0 - p) / total as f64).sqrt();
                assert!((freq - p).abs() <= 4.0 * sd + 1e-12, "{noise:?} ({i},{j}): {freq} vs {p}");
            }
        }
    }
}

fn segment_in_r20(n: usize, rng: &mut RngStream) -> Matrix {
    let dir: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = Matrix::zeros(n, 20);
    for r in 0..n {
        let t = rng.uniform();
        for (c, d) in dir.iter().enumerate() {
            x.row_mut(r)[c] = 1.0 + t * d / norm;
        }
    }
    x
}

#[test]
fn lid_of_segment_is_near_one() {
    let mut rng = RngStream::new(21, 0);
    let x = segment_in_r20(1000, &mut rng);
    let est = lid_of_embedding(&x, 20).unwrap();
    assert!((0.8..=1.3).contains(&est.mean), "{}", est.mean);
}

#[test]
fn lid_batch_through_identity_layer_matches_embedding() {
    let mut rng = RngStream::new(22, 0);
    let x = segment_in_r20(300, &mut rng);
    let identity = linear(Matrix::identity(20));
    let cfg = LidConfig { k: 20, batch_size: 300, feature_layer: Some(0) };
    let a = lid_batch(&identity, &x, &cfg).unwrap();
    let b = lid_of_embedding(&x, 20).unwrap();
    assert_eq!(a.per_point, b.per_point);
}

#[test]
fn collapsed_clusters_have_low_lid() {
    let mut rng = RngStream::new(23, 0);
    let k = 4;
    let dir: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let mut g = Matrix::zeros(400, 8);
    for r in 0..400 {
        let t = 1e-6 * rng.uniform();
        let row = g.row_mut(r);
        row[r % k] = 10.0;
        for (v, d) in row.iter_mut().zip(&dir) {
            *v += t * d;
        }
    }
    let est = lid_of_embedding(&g, 20).unwrap();
    assert!((0.0..=1.3).contains(&est.mean), "{}", est.mean);
}

#[test]
fn csr_is_monotone_in_radius() {
    let mut rng = RngStream::new(31, 0);
    let model = MlpModel::new(&[2, 16, 3], Activation::Relu, 0.0, &mut rng).unwrap();
    let x = random_matrix(100, 2, &mut rng);
    let mut prev = 0.0;
    for r in [0.01, 0.1, 0.5, 2.0] {
        let cfg = CsrConfig { radius: r, probes: 20, step: None };
        let mut rng = RngStream::new(32, 0);
        let csr = critical_sample_ratio(&model, &x, &cfg, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&csr));
        assert!(csr + 0.05 >= prev, "radius {r}: {csr} < {prev}");
        prev = csr;
    }
    assert!(prev > 0.0);
}

#[test]
fn label_precision_of_random_losses_is_clean_fraction() {
    let n = 10_000;
    let eta = 0.4;
    let mut rng = RngStream::new(41, 0);
    let mut mask: Vec<bool> = (0..n).map(|i| i >= (eta * n as f64) as usize).collect();
    rng.shuffle(&mut mask);
    let losses: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let p = label_precision(&losses, &mask, eta).unwrap();
    let tol = 3.0 * (0.4f64 * 0.6 / 6000.0).sqrt();
    assert!((p - 0.6).abs() <= tol, "{p}");
}
