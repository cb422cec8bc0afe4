//! Node inference: sigma-point belief propagation on the stacked state, and
//! the gradient-descent least-squares baseline.
//!
//! An SPBP measurement update for agent `j` works on the stacked vector
//! `[x_j^T p_k1^T ... p_kM^T]^T`. The stacked prior is block-diagonal (the
//! agent's predicted belief followed by each measured neighbor's position
//! message), the range likelihood is handled with an unscented transform, and
//! the agent's updated belief is the leading `STATE_DIM` block of the result.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{GaussianBelief, NodeId, StateMatrix, StateVector, STATE_DIM};
use crate::scalar::Real;

/// Scaled unscented-transform parameters.
///
/// `kappa = None` selects `3 - L` for an `L`-dimensional input, so that
/// `L + λ = 3` whatever the stacked dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtParams<T: Real> {
    pub alpha: T,
    pub beta: T,
    pub kappa: Option<T>,
}

impl<T: Real> Default for UtParams<T> {
    fn default() -> Self {
        Self { alpha: T::one(), beta: T::lit(2.0), kappa: None }
    }
}

impl<T: Real> UtParams<T> {
    pub fn lambda(&self, dim: usize) -> T {
        let l = T::from_count(dim);
        let kappa = self.kappa.unwrap_or(T::lit(3.0) - l);
        self.alpha * self.alpha * (l + kappa) - l
    }
}

/// `2L + 1` sigma points with their mean and covariance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet<T: Real> {
    pub points: Vec<DVector<T>>,
    pub mean_weights: Vec<T>,
    pub cov_weights: Vec<T>,
}

impl<T: Real> SigmaPointSet<T> {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    pub fn weighted_mean(&self) -> DVector<T> {
        let mut m = DVector::zeros(self.dim());
        for (p, w) in self.points.iter().zip(&self.mean_weights) {
            m.axpy(*w, p, T::one());
        }
        m
    }

    pub fn weighted_covariance(&self) -> DMatrix<T> {
        let mean = self.weighted_mean();
        let n = self.dim();
        let mut c = DMatrix::zeros(n, n);
        for (p, w) in self.points.iter().zip(&self.cov_weights) {
            let d = p - &mean;
            c.ger(*w, &d, &d, T::one());
        }
        c
    }

    fn from_sqrt(mean: &DVector<T>, sqrt: &DMatrix<T>, params: &UtParams<T>) -> Result<Self> {
        let n = mean.len();
        let lambda = params.lambda(n);
        let spread = T::from_count(n) + lambda;
        if !(spread > T::zero()) {
            return Err(invalid("unscented parameters give L + lambda <= 0"));
        }
        let scale = spread.sqrt();
        let mut points = Vec::with_capacity(2 * n + 1);
        points.push(mean.clone());
        for i in 0..n {
            let col = sqrt.column(i) * scale;
            points.push(mean + &col);
            points.push(mean - &col);
        }
        let w = T::one() / (T::lit(2.0) * spread);
        let w0 = lambda / spread;
        let mut mean_weights = vec![w; 2 * n + 1];
        let mut cov_weights = vec![w; 2 * n + 1];
        mean_weights[0] = w0;
        cov_weights[0] = w0 + (T::one() - params.alpha * params.alpha + params.beta);
        Ok(Self { points, mean_weights, cov_weights })
    }
}

/// Standard scaled unscented sigma-point set for `N(mean, cov)`.
pub fn generate_sigma_points<T: Real>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    params: &UtParams<T>,
) -> Result<SigmaPointSet<T>> {
    if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
        return Err(Error::DimensionMismatch { expected: mean.len(), actual: cov.nrows() });
    }
    let sqrt = linalg::psd_sqrt(cov)?;
    SigmaPointSet::from_sqrt(mean, &sqrt, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateDiagnostics {
    /// Innovation covariance needed diagonal jitter to factorize.
    pub regularized: bool,
}

/// Jitter added to a singular innovation covariance.
pub const INNOVATION_JITTER: f64 = 1e-9;

/// Sigma-point Bayesian update of `N(mean, cov)` against `z = h(x) + n`,
/// `n ~ N(0, noise)`.
pub fn unscented_update<T, F>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    h: F,
    z: &DVector<T>,
    noise: &DMatrix<T>,
    params: &UtParams<T>,
) -> Result<(DVector<T>, DMatrix<T>, UpdateDiagnostics)>
where
    T: Real,
    F: Fn(&DVector<T>) -> DVector<T>,
{
    let sigma = generate_sigma_points(mean, cov, params)?;
    update_with_points(mean, cov, &sigma, h, z, noise)
}

fn update_with_points<T, F>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    sigma: &SigmaPointSet<T>,
    h: F,
    z: &DVector<T>,
    noise: &DMatrix<T>,
) -> Result<(DVector<T>, DMatrix<T>, UpdateDiagnostics)>
where
    T: Real,
    F: Fn(&DVector<T>) -> DVector<T>,
{
    let nz = z.len();
    if noise.nrows() != nz || noise.ncols() != nz {
        return Err(Error::DimensionMismatch { expected: nz, actual: noise.nrows() });
    }
    let images: Vec<DVector<T>> = sigma.points.iter().map(&h).collect();
    if let Some(bad) = images.iter().find(|y| y.len() != nz) {
        return Err(Error::DimensionMismatch { expected: nz, actual: bad.len() });
    }

    let mut z_hat = DVector::zeros(nz);
    for (y, w) in images.iter().zip(&sigma.mean_weights) {
        z_hat.axpy(*w, y, T::one());
    }
    let mut s = noise.clone();
    let mut cross = DMatrix::zeros(mean.len(), nz);
    for ((x, y), w) in sigma.points.iter().zip(&images).zip(&sigma.cov_weights) {
        let dy = y - &z_hat;
        let dx = x - mean;
        s.ger(*w, &dy, &dy, T::one());
        cross.ger(*w, &dx, &dy, T::one());
    }
    linalg::symmetrize_dyn(&mut s);

    let mut diagnostics = UpdateDiagnostics::default();
    let chol = match s.clone().cholesky() {
        Some(c) => c,
        None => {
            diagnostics.regularized = true;
            let jittered = &s + DMatrix::identity(nz, nz) * T::lit(INNOVATION_JITTER);
            jittered
                .cholesky()
                .ok_or_else(|| Error::NumericFailure("innovation covariance is singular".into()))?
        }
    };
    // K = P_xz S^-1, computed as (S^-1 P_xz^T)^T.
    let gain = chol.solve(&cross.transpose()).transpose();
    let innovation = z - &z_hat;
    let post_mean = mean + &gain * innovation;
    let mut post_cov = cov - &gain * &s * gain.transpose();
    linalg::symmetrize_dyn(&mut post_cov);
    linalg::clamp_psd(&mut post_cov);
    if post_mean.iter().chain(post_cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite posterior".into()));
    }
    Ok((post_mean, post_cov, diagnostics))
}

/// One averaged range to a neighbor together with the neighbor's position
/// message.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEntry<T: Real> {
    pub neighbor: NodeId,
    /// Averaged range, meters.
    pub range: T,
    /// Noise variance of `range`, m².
    pub variance: T,
    pub position_mean: Vector3<T>,
    pub position_covariance: Matrix3<T>,
}

/// The measurements an agent made in one time step, in measurement order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch<T: Real> {
    entries: Vec<MeasurementEntry<T>>,
}

impl<T: Real> MeasurementBatch<T> {
    pub fn new(entries: Vec<MeasurementEntry<T>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.neighbor) {
                return Err(invalid(format!("neighbor {} measured twice in one batch", e.neighbor)));
            }
            if !(e.variance > T::zero()) || !e.variance.is_finite() {
                return Err(invalid("measurement variance must be positive"));
            }
            if !e.range.is_finite() || e.position_mean.iter().any(|v| !v.is_finite()) {
                return Err(invalid("measurement must be finite"));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[MeasurementEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Block-diagonal prior on the stacked vector `[x_j, p_k1, ..., p_kM]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedGaussian<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
    block_sizes: Vec<usize>,
}

impl<T: Real> StackedGaussian<T> {
    pub fn from_prior(prior: &GaussianBelief<T>, batch: &MeasurementBatch<T>) -> Self {
        let dim = STATE_DIM + 3 * batch.len();
        let mut mean = DVector::zeros(dim);
        let mut covariance = DMatrix::zeros(dim, dim);
        mean.rows_mut(0, STATE_DIM).copy_from(&prior.mean);
        covariance.view_mut((0, 0), (STATE_DIM, STATE_DIM)).copy_from(&prior.covariance);
        let mut block_sizes = vec![STATE_DIM];
        for (i, e) in batch.entries().iter().enumerate() {
            let at = STATE_DIM + 3 * i;
            mean.rows_mut(at, 3).copy_from(&e.position_mean);
            covariance.view_mut((at, at), (3, 3)).copy_from(&e.position_covariance);
            block_sizes.push(3);
        }
        Self { mean, covariance, block_sizes }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Block-diagonal square root, factorizing each block on its own. An
    /// anchor's zero block then contributes exactly-zero columns.
    pub fn sqrt(&self) -> Result<DMatrix<T>> {
        let n = self.dim();
        let mut s = DMatrix::zeros(n, n);
        let mut at = 0;
        for &b in &self.block_sizes {
            let block = self.covariance.view((at, at), (b, b)).into_owned();
            s.view_mut((at, at), (b, b)).copy_from(&linalg::psd_sqrt(&block)?);
            at += b;
        }
        Ok(s)
    }

    pub fn sigma_points(&self, params: &UtParams<T>) -> Result<SigmaPointSet<T>> {
        SigmaPointSet::from_sqrt(&self.mean, &self.sqrt()?, params)
    }
}

/// Stacked range function: `‖p_j - p_k‖` for every measured neighbor.
fn stacked_ranges<T: Real>(x: &DVector<T>, count: usize) -> DVector<T> {
    let pj = x.fixed_rows::<3>(0);
    DVector::from_iterator(
        count,
        (0..count).map(|i| (pj - x.fixed_rows::<3>(STATE_DIM + 3 * i)).norm()),
    )
}

/// SPBP measurement update of an already-predicted belief.
///
/// Builds the stacked prior, runs the sigma-point update against the stacked
/// ranges, and marginalizes back to the agent's own state.
pub fn spbp_update<T: Real>(
    prior: &GaussianBelief<T>,
    batch: &MeasurementBatch<T>,
    params: &UtParams<T>,
) -> Result<(GaussianBelief<T>, UpdateDiagnostics)> {
    if batch.is_empty() {
        return Err(invalid("empty measurement batch; use the prediction as the belief"));
    }
    let stacked = StackedGaussian::from_prior(prior, batch);
    let sigma = stacked.sigma_points(params)?;
    let count = batch.len();
    let z = DVector::from_iterator(count, batch.entries().iter().map(|e| e.range));
    let noise = DMatrix::from_diagonal(&DVector::from_iterator(
        count,
        batch.entries().iter().map(|e| e.variance),
    ));
    let (mean, cov, diagnostics) = update_with_points(
        &stacked.mean,
        &stacked.covariance,
        &sigma,
        |x| stacked_ranges(x, count),
        &z,
        &noise,
    )?;
    let mean = StateVector::from_iterator(mean.rows(0, STATE_DIM).iter().copied());
    let mut covariance: StateMatrix<T> =
        StateMatrix::from_fn(|r, c| cov[(r, c)]);
    linalg::symmetrize(&mut covariance);
    Ok((GaussianBelief { mean, covariance }, diagnostics))
}

/// Position block of a belief: `(μ_p, C_p)`.
pub fn marginalize_position<T: Real>(belief: &GaussianBelief<T>) -> (Vector3<T>, Matrix3<T>) {
    (belief.position_mean(), belief.position_covariance())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsOptions<T: Real> {
    pub step: T,
    pub max_iters: usize,
    /// Stop once the gradient norm drops below this.
    pub tol: T,
}

impl<T: Real> Default for LsOptions<T> {
    fn default() -> Self {
        Self { step: T::lit(0.1), max_iters: 500, tol: T::lit(1e-6) }
    }
}

/// Sum of squared range residuals and its gradient.
pub fn ls_objective<T: Real>(p: &Vector3<T>, batch: &MeasurementBatch<T>) -> (T, Vector3<T>) {
    let mut f = T::zero();
    let mut g = Vector3::zeros();
    for e in batch.entries() {
        let d = p - e.position_mean;
        let dist = d.norm();
        let r = dist - e.range;
        f += r * r;
        if dist > T::zero() {
            g += d * (T::lit(2.0) * r / dist);
        }
    }
    (f, g)
}

/// Gradient-descent least-squares position fix, warm-started at `prev`.
pub fn ls_estimate<T: Real>(
    prev: &Vector3<T>,
    batch: &MeasurementBatch<T>,
    options: &LsOptions<T>,
) -> Result<Vector3<T>> {
    if batch.is_empty() {
        return Err(invalid("least squares needs at least one measurement"));
    }
    let mut p = *prev;
    let limit = T::lit(1e6);
    for _ in 0..options.max_iters {
        let (_, g) = ls_objective(&p, batch);
        if g.norm() <= options.tol {
            break;
        }
        p -= g * options.step;
        if !(p.norm() <= limit) {
            return Err(Error::EstimationFailure("least-squares iterate diverged".into()));
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn scalar_sigma_points_are_symmetric() {
        let set = generate_sigma_points(&dvector![0.0f64], &DMatrix::identity(1, 1), &UtParams::default())
            .unwrap();
        assert_eq!(set.points.len(), 3);
        assert_eq!(set.points[0][0], 0.0);
        assert_eq!(set.points[1][0], -set.points[2][0]);
        assert!(set.points[1][0] > 0.0);
        assert!(set.weighted_mean()[0].abs() < 1e-15);
        let total: f64 = set.mean_weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_covariance_collapses_points() {
        let mean = dvector![1.0, -2.0, 0.5];
        let set = generate_sigma_points(&mean, &DMatrix::zeros(3, 3), &UtParams::default()).unwrap();
        assert!(set.points.iter().all(|p| p == &mean));
    }

    #[test]
    fn indefinite_covariance_is_a_numeric_failure() {
        let mut c = DMatrix::identity(2, 2);
        c[(1, 1)] = -0.5;
        let err = generate_sigma_points(&dvector![0.0, 0.0], &c, &UtParams::default()).unwrap_err();
        match err {
            Error::NotPositiveSemidefinite { min_eigenvalue } => assert!((min_eigenvalue + 0.5).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_scalar_update_is_conjugate() {
        let (m, c, diag) = unscented_update(
            &dvector![0.0],
            &DMatrix::identity(1, 1),
            |x| x.clone(),
            &dvector![2.0f64],
            &DMatrix::identity(1, 1),
            &UtParams::default(),
        )
        .unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((c[(0, 0)] - 0.5).abs() < 1e-12);
        assert!(!diag.regularized);
    }

    fn anchor_entry(id: u32, p: Vector3<f64>, range: f64, variance: f64) -> MeasurementEntry<f64> {
        MeasurementEntry {
            neighbor: NodeId::anchor(id),
            range,
            variance,
            position_mean: p,
            position_covariance: Matrix3::zeros(),
        }
    }

    #[test]
    fn uninformative_measurement_leaves_prior() {
        let mut cov = StateMatrix::identity();
        cov[(0, 0)] = 4.0;
        let prior = GaussianBelief::new(StateVector::from_column_slice(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]), cov)
            .unwrap();
        let batch = MeasurementBatch::new(vec![anchor_entry(1, Vector3::new(10.0, 0.0, 0.0), 7.0, 1e12)]).unwrap();
        let (post, _) = spbp_update(&prior, &batch, &UtParams::default()).unwrap();
        assert!((post.mean - prior.mean).norm() < 1e-6);
        assert!((post.covariance - prior.covariance).norm() / prior.covariance.norm() < 1e-6);
    }

    #[test]
    fn empty_batch_rejected() {
        let prior = GaussianBelief::<f64>::new(StateVector::zeros(), StateMatrix::identity()).unwrap();
        let batch = MeasurementBatch::new(vec![]).unwrap();
        assert!(spbp_update(&prior, &batch, &UtParams::default()).is_err());
    }

    #[test]
    fn duplicate_neighbors_rejected() {
        let e = anchor_entry(1, Vector3::zeros(), 1.0, 1.0);
        assert!(MeasurementBatch::new(vec![e.clone(), e]).is_err());
    }

    #[test]
    fn marginal_position_slices() {
        let mut cov = StateMatrix::<f64>::identity();
        cov[(0, 1)] = 0.3;
        cov[(1, 0)] = 0.3;
        cov[(0, 4)] = 0.2;
        cov[(4, 0)] = 0.2;
        let b = GaussianBelief::new(StateVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), cov).unwrap();
        let (mu, c) = marginalize_position(&b);
        assert_eq!(mu, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(c, cov.fixed_view::<3, 3>(0, 0).into_owned());
        let a = GaussianBelief::anchor(Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(marginalize_position(&a).1, Matrix3::zeros());
        let i = GaussianBelief::<f64>::new(StateVector::zeros(), StateMatrix::identity()).unwrap();
        assert_eq!(marginalize_position(&i).1, Matrix3::identity());
    }

    #[test]
    fn ls_fixed_point_at_exact_solution() {
        let truth = Vector3::new(1.0, 2.0, 0.5);
        let anchors = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0), Vector3::new(0.0, 5.0, 3.0)];
        let batch = MeasurementBatch::new(
            anchors
                .iter()
                .enumerate()
                .map(|(i, a)| anchor_entry(i as u32, *a, (truth - a).norm(), 0.01))
                .collect(),
        )
        .unwrap();
        let p = ls_estimate(&truth, &batch, &LsOptions::default()).unwrap();
        assert_eq!(p, truth);
    }

    #[test]
    fn ls_divergence_is_reported() {
        let batch = MeasurementBatch::new(vec![anchor_entry(1, Vector3::zeros(), 1.0, 1.0)]).unwrap();
        let opts = LsOptions { step: 1e9, max_iters: 10, tol: 0.0 };
        assert!(matches!(
            ls_estimate(&Vector3::new(3.0, 0.0, 0.0), &batch, &opts),
            Err(Error::EstimationFailure(_))
        ));
    }
}
