#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use nln_core::model::StateMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `G G^T / n` for a Gaussian `n × rank` factor, so rank-deficient when
/// `rank < n`.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize, scale: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, rank, |_, _| normal(rng));
    let mut c = &g * g.transpose() * (scale / n as f64);
    nln_core::linalg::symmetrize_dyn(&mut c);
    c
}

/// Positive definite with eigenvalues bounded away from zero.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64, scale: f64) -> DMatrix<f64> {
    random_psd(rng, n, n, scale) + DMatrix::identity(n, n) * floor
}

pub fn random_state_cov(rng: &mut ChaCha8Rng) -> StateMatrix<f64> {
    let rank = rng.random_range(1..=6);
    nln_core::linalg::from_dyn(&random_psd(rng, 6, rank, 2.0))
}

pub fn random_pd3(rng: &mut ChaCha8Rng, floor: f64, scale: f64) -> Matrix3<f64> {
    nln_core::linalg::from_dyn(&random_pd(rng, 3, floor, scale))
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(normal(rng), normal(rng), normal(rng));
        if v.norm() > 1e-3 {
            return v.normalize();
        }
    }
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng) * scale)
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
