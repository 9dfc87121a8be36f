use proptest::prelude::*;

use noisereg::diagnostics::lid_of_embedding;
use noisereg::jacobian::sample_bound;
use noisereg::mlp::{Activation, MlpModel};
use noisereg::noise::{circular_noise_matrix, uniform_noise_matrix, uniform_noise_matrix_self_flip, TransitionMatrix};
use noisereg::variance_reg::{combined_objective, r_v_hat, PerturbationSpec, PredictionSpace, RegularizerConfig};
use noisereg::{Matrix, RngStream};

fn rows_sum_to_one(t: &TransitionMatrix) -> bool {
    (0..t.k()).all(|i| (t.matrix().row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12)
}

fn gaussian_matrix(r: usize, c: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 0);
    let mut m = Matrix::zeros(r, c);
    for v in m.as_mut_slice() {
        *v = rng.normal();
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constructors_are_row_stochastic(k in 2usize..40, eta in 0.0f64..=1.0) {
        prop_assert!(rows_sum_to_one(&uniform_noise_matrix(k, eta).unwrap()));
        prop_assert!(rows_sum_to_one(&uniform_noise_matrix_self_flip(k, eta).unwrap()));
        prop_assert!(rows_sum_to_one(&circular_noise_matrix(k, eta).unwrap()));
    }

    #[test]
    fn rv_hat_is_nonnegative(seed in any::<u64>(), sigma in 0.0f64..2.0, dropout in 0.0f64..0.8) {
        let mut rng = RngStream::new(seed, 0);
        let model = MlpModel::new(&[3, 8, 4], Activation::Relu, dropout, &mut rng).unwrap();
        let x = gaussian_matrix(5, 3, seed);
        let spec = PerturbationSpec { gaussian_sigma: sigma, dropout_on: true };
        for space in [PredictionSpace::Logits, PredictionSpace::Probabilities] {
            let rv = r_v_hat(&model, &x, &spec, space, &mut rng).unwrap();
            prop_assert!(rv.value >= 0.0);
        }
    }

    #[test]
    fn rv_component_ignores_labels(seed in any::<u64>(), shift in 1usize..4) {
        let mut rng = RngStream::new(seed, 0);
        let model = MlpModel::new(&[2, 6, 4], Activation::Tanh, 0.0, &mut rng).unwrap();
        let x = gaussian_matrix(6, 2, seed ^ 1);
        let a: Vec<usize> = (0..6).map(|i| i % 4).collect();
        let b: Vec<usize> = a.iter().map(|l| (l + shift) % 4).collect();
        let cfg = RegularizerConfig { lambda_max: 2.0, ..RegularizerConfig::default() };
        let spec = PerturbationSpec::gaussian(0.3);
        let oa = combined_objective(&model, &x, &a, &spec, &cfg, 10, &mut RngStream::new(seed, 1)).unwrap();
        let ob = combined_objective(&model, &x, &b, &spec, &cfg, 10, &mut RngStream::new(seed, 1)).unwrap();
        prop_assert_eq!(oa.components.rv, ob.components.rv);
    }

    #[test]
    fn lid_is_scale_and_permutation_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let g = gaussian_matrix(60, 5, seed);
        let base = lid_of_embedding(&g, 10).unwrap();
        let scaled = lid_of_embedding(&g.map(|v| v * scale), 10).unwrap();
        prop_assert!((base.mean - scaled.mean).abs() <= 1e-9 * base.mean);

        let mut order: Vec<usize> = (0..60).collect();
        RngStream::new(seed, 2).shuffle(&mut order);
        let permuted = lid_of_embedding(&g.select_rows(&order), 10).unwrap();
        for (new_i, &old_i) in order.iter().enumerate() {
            prop_assert!((permuted.per_point[new_i] - base.per_point[old_i]).abs() <= 1e-9 * base.per_point[old_i]);
        }
    }

    #[test]
    fn sample_bound_shrinks_as_tolerances_loosen(eps in 0.01f64..1.0, delta in 0.001f64..0.5) {
        let n = sample_bound(eps, delta).unwrap();
        prop_assert!(sample_bound(eps * 2.0, delta).unwrap() <= n);
        prop_assert!(sample_bound(eps, (delta * 2.0).min(0.999)).unwrap() <= n);
    }
}
