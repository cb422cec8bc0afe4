mod common;

use nalgebra::Vector3;
use nln_core::linalg::{max_asymmetry, min_eigenvalue, to_dyn};
use nln_core::model::{
    measurement_variance, motion_matrices, predict_belief, GaussianBelief, MotionModel, StateMatrix, StateVector,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn prediction_stays_symmetric_psd(seed in any::<u64>(), dt in 0.0f64..10.0, s in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov = common::random_state_cov(&mut rng);
        let b = GaussianBelief::new(StateVector::zeros(), cov).unwrap();
        let model = MotionModel::new(s, s * 0.5, s * 0.1).unwrap();
        let p = predict_belief(&b, &model, dt).unwrap();
        let c = to_dyn(&p.covariance);
        prop_assert!(max_asymmetry(&c) <= 1e-9);
        let scale = c.norm().max(1.0);
        prop_assert!(min_eigenvalue(&c) >= -1e-9 * scale);
    }

    #[test]
    fn zero_step_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov = common::random_state_cov(&mut rng);
        let mean = StateVector::from_fn(|_, _| common::normal(&mut rng));
        let b = GaussianBelief::new(mean, cov).unwrap();
        let p = predict_belief(&b, &MotionModel::new(1.0, 2.0, 3.0).unwrap(), 0.0).unwrap();
        prop_assert_eq!(p, b);
    }

    #[test]
    fn variance_decreases_in_count_and_erc(m in 1u32..1000, xi in 0.01f64..1000.0) {
        let v = measurement_variance(m, xi).unwrap();
        prop_assert!(measurement_variance(m + 1, xi).unwrap() < v);
        prop_assert!(measurement_variance(m, xi * 1.01).unwrap() < v);
    }

    #[test]
    fn anchor_position_block_is_fixed(x in -50.0f64..50.0, y in -50.0f64..50.0, z in -5.0f64..5.0, dt in 0.0f64..10.0) {
        let a = GaussianBelief::anchor(Vector3::new(x, y, z)).unwrap();
        let p = predict_belief(&a, &MotionModel::static_node(), dt).unwrap();
        prop_assert_eq!(p.position_mean(), a.position_mean());
        prop_assert_eq!(p.position_covariance(), a.position_covariance());
    }
}

#[test]
fn prediction_matches_monte_carlo_propagation() {
    // C = I, dt = 1, no driving noise: sample x ~ N(0, I), push through A and
    // compare the sample covariance with A A^T entry by entry.
    let (a, _) = motion_matrices(&MotionModel::static_node(), 1.0).unwrap();
    let b = GaussianBelief::new(StateVector::zeros(), StateMatrix::identity()).unwrap();
    let predicted = predict_belief(&b, &MotionModel::static_node(), 1.0).unwrap().covariance;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1_000_000usize;
    let mut sum = StateMatrix::<f64>::zeros();
    let mut sum_sq = StateMatrix::<f64>::zeros();
    for _ in 0..n {
        let x = StateVector::from_fn(|_, _| common::normal(&mut rng));
        let y = a * x;
        let outer = y * y.transpose();
        sum += outer;
        sum_sq += outer.component_mul(&outer);
    }
    let nf = n as f64;
    for r in 0..6 {
        for c in 0..6 {
            let mean = sum[(r, c)] / nf;
            let var = sum_sq[(r, c)] / nf - mean * mean;
            let se = (var / nf).sqrt();
            assert!(
                (mean - predicted[(r, c)]).abs() <= 3.0 * se + 1e-12,
                "entry ({r},{c}): sample {mean} vs {}",
                predicted[(r, c)]
            );
        }
    }
    let pos = predicted.fixed_view::<3, 3>(0, 0);
    assert_eq!(pos.into_owned(), nalgebra::Matrix3::identity() * 2.0);
}
