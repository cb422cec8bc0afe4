//! Node state, Gaussian beliefs and the motion/measurement models.
//!
//! States are `[p^T v^T]^T` with a 3-D position and a 3-D velocity. The
//! default motion model is the constant-velocity model driven by white
//! acceleration noise; any other linear model can be plugged in through
//! [`LinearMotion`].

use std::fmt;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// State dimension under the constant-velocity model.
pub const STATE_DIM: usize = 6;

pub type StateVector<T> = SVector<T, STATE_DIM>;
pub type StateMatrix<T> = SMatrix<T, STATE_DIM, STATE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Agent,
    Anchor,
}

/// Identity of a node. Ordering is by numeric id first, which is what every
/// deterministic tie-break in the crate relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub id: u32,
    pub kind: NodeKind,
}

impl NodeId {
    pub const fn agent(id: u32) -> Self {
        Self { id, kind: NodeKind::Agent }
    }

    pub const fn anchor(id: u32) -> Self {
        Self { id, kind: NodeKind::Anchor }
    }

    pub fn is_anchor(&self) -> bool {
        self.kind == NodeKind::Anchor
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id)
    }
}

/// Kinematic state of a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState<T: Real> {
    pub position: Vector3<T>,
    pub velocity: Vector3<T>,
}

impl<T: Real> NodeState<T> {
    pub fn new(position: Vector3<T>, velocity: Vector3<T>) -> Result<Self> {
        if position.iter().chain(velocity.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("node state must be finite"));
        }
        Ok(Self { position, velocity })
    }

    pub fn at_rest(position: Vector3<T>) -> Result<Self> {
        Self::new(position, Vector3::zeros())
    }

    pub fn to_vector(&self) -> StateVector<T> {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        x
    }

    pub fn from_vector(x: &StateVector<T>) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into_owned(),
            velocity: x.fixed_rows::<3>(3).into_owned(),
        }
    }
}

/// Mean/covariance representation of a node belief.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief<T: Real> {
    pub mean: StateVector<T>,
    pub covariance: StateMatrix<T>,
}

impl<T: Real> GaussianBelief<T> {
    /// Validates and symmetrizes.
    pub fn new(mean: StateVector<T>, mut covariance: StateMatrix<T>) -> Result<Self> {
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(invalid("belief mean must be finite"));
        }
        linalg::check_covariance(&linalg::to_dyn(&covariance))?;
        linalg::symmetrize(&mut covariance);
        Ok(Self { mean, covariance })
    }

    /// Belief with independent position and velocity uncertainty.
    pub fn isotropic(state: &NodeState<T>, position_std: T, velocity_std: T) -> Result<Self> {
        if position_std < T::zero() || velocity_std < T::zero() {
            return Err(invalid("standard deviations must be nonnegative"));
        }
        let mut cov = StateMatrix::zeros();
        for i in 0..3 {
            cov[(i, i)] = position_std * position_std;
            cov[(i + 3, i + 3)] = velocity_std * velocity_std;
        }
        Self::new(state.to_vector(), cov)
    }

    /// An anchor: known position, zero velocity, exactly-zero covariance.
    pub fn anchor(position: Vector3<T>) -> Result<Self> {
        Self::new(NodeState::at_rest(position)?.to_vector(), StateMatrix::zeros())
    }

    pub fn position_mean(&self) -> Vector3<T> {
        self.mean.fixed_rows::<3>(0).into_owned()
    }

    pub fn position_covariance(&self) -> Matrix3<T> {
        self.covariance.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn position_trace(&self) -> T {
        self.position_covariance().trace()
    }

    /// Prediction through a linear motion model.
    pub fn predict<M: LinearMotion<T> + ?Sized>(&self, motion: &M, dt: T) -> Result<Self> {
        predict_belief(self, motion, dt)
    }
}

/// A linear-Gaussian state transition `x' = A(dt) x + w`, `w ~ N(0, Cw(dt))`.
pub trait LinearMotion<T: Real> {
    /// Returns `(A(dt), Cw(dt))`.
    fn matrices(&self, dt: T) -> Result<(StateMatrix<T>, StateMatrix<T>)>;
}

/// Constant-velocity model with per-axis white acceleration noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionModel<T: Real> {
    /// Driving-noise variances `(σx², σy², σz²)` in (m/s²)².
    pub noise_variance: Vector3<T>,
}

impl<T: Real> MotionModel<T> {
    pub fn new(sigma_x2: T, sigma_y2: T, sigma_z2: T) -> Result<Self> {
        let noise_variance = Vector3::new(sigma_x2, sigma_y2, sigma_z2);
        if noise_variance.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(invalid("driving-noise variances must be finite and nonnegative"));
        }
        Ok(Self { noise_variance })
    }

    /// No driving noise at all; what anchors use.
    pub fn static_node() -> Self {
        Self { noise_variance: Vector3::zeros() }
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self { noise_variance: self.noise_variance * factor }
    }
}

/// `A = [[I, dt I], [0, I]]`, `Cw = B C_u B^T` with `B = [dt²/2 I; dt I]`.
pub fn motion_matrices<T: Real>(
    model: &MotionModel<T>,
    dt: T,
) -> Result<(StateMatrix<T>, StateMatrix<T>)> {
    if !(dt >= T::zero()) || !dt.is_finite() {
        return Err(invalid(format!("time step must be >= 0, got {}", dt.as_f64())));
    }
    let mut a = StateMatrix::identity();
    let mut cw = StateMatrix::zeros();
    let half_dt2 = dt * dt * T::lit(0.5);
    for i in 0..3 {
        a[(i, i + 3)] = dt;
        let s = model.noise_variance[i];
        cw[(i, i)] = half_dt2 * half_dt2 * s;
        cw[(i, i + 3)] = half_dt2 * dt * s;
        cw[(i + 3, i)] = half_dt2 * dt * s;
        cw[(i + 3, i + 3)] = dt * dt * s;
    }
    Ok((a, cw))
}

impl<T: Real> LinearMotion<T> for MotionModel<T> {
    fn matrices(&self, dt: T) -> Result<(StateMatrix<T>, StateMatrix<T>)> {
        motion_matrices(self, dt)
    }
}

/// `μ' = A μ`, `C' = A C A^T + Cw`, symmetrized.
pub fn predict_belief<T: Real, M: LinearMotion<T> + ?Sized>(
    belief: &GaussianBelief<T>,
    motion: &M,
    dt: T,
) -> Result<GaussianBelief<T>> {
    let (a, cw) = motion.matrices(dt)?;
    let mean = a * belief.mean;
    let mut covariance = a * belief.covariance * a.transpose() + cw;
    linalg::symmetrize(&mut covariance);
    Ok(GaussianBelief { mean, covariance })
}

pub fn true_range<T: Real>(p_j: &Vector3<T>, p_k: &Vector3<T>) -> T {
    (p_j - p_k).norm()
}

/// Equivalent ranging coefficient: the inverse variance of one range
/// measurement over a link, in 1/m².
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Erc<T: Real>(T);

impl<T: Real> Erc<T> {
    pub fn new(xi: T) -> Result<Self> {
        if !(xi > T::zero()) || !xi.is_finite() {
            return Err(invalid(format!("ERC must be positive, got {}", xi.as_f64())));
        }
        Ok(Self(xi))
    }

    pub fn value(self) -> T {
        self.0
    }
}

/// Variance `(m ξ)^-1` of the average of `m` range measurements.
pub fn measurement_variance<T: Real>(count: u32, xi: T) -> Result<T> {
    if count == 0 {
        return Err(invalid("measurement count must be >= 1"));
    }
    let xi = Erc::new(xi)?.value();
    Ok(T::one() / (T::from_count(count as usize) * xi))
}

/// One averaged range measurement as consumed by node inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeMeasurement<T: Real> {
    pub initiator: NodeId,
    pub responder: NodeId,
    /// Averaged range in meters.
    pub value: T,
    pub count: u32,
    pub variance: T,
}

impl<T: Real> RangeMeasurement<T> {
    pub fn new(initiator: NodeId, responder: NodeId, value: T, count: u32, xi: Erc<T>) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidArgument("range must be finite".into()));
        }
        Ok(Self { initiator, responder, value, count, variance: measurement_variance(count, xi.value())? })
    }
}
