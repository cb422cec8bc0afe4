//! Network operation: predicted position covariance after a set of
//! measurements, threshold-based node activation, and measurement-count
//! allocation.
//!
//! Position uncertainty after agent `j` performs `m_k` measurements with each
//! neighbor `k` is approximated by
//!
//! ```text
//! Č(m) = [ C_pj^-1 + Σ_k č_k(m_k) u_k u_k^T ]^-1,   č(m) = m ξ / (1 + m ξ u^T C_pk u)
//! ```
//!
//! which linearizes the range model around the current means and treats the
//! neighbor position uncertainty as extra noise along `u`.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{LinearMotion, NodeId, StateMatrix};
use crate::scalar::Real;

/// Minimum separation of two means for a direction to be defined.
pub const DIRECTION_EPS: f64 = 1e-9;

/// Regularization applied to a singular agent position covariance.
pub const COVARIANCE_RIDGE: f64 = 1e-12;

/// Estimated unit vector pointing from `mu_j` to `mu_k`.
pub fn unit_direction<T: Real>(mu_j: &Vector3<T>, mu_k: &Vector3<T>) -> Result<Vector3<T>> {
    let d = mu_k - mu_j;
    let n = d.norm();
    if !(n > T::lit(DIRECTION_EPS)) {
        return Err(Error::DegenerateGeometry);
    }
    Ok(d / n)
}

/// Everything the allocation math needs to know about one neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkInfo<T: Real> {
    pub neighbor: NodeId,
    pub u: Vector3<T>,
    /// ERC of the link, 1/m². Zero marks a link that carries no information.
    pub xi: T,
    /// Neighbor position covariance.
    pub c_pk: Matrix3<T>,
    /// `ξ u^T C_pk u`.
    pub rho: T,
}

impl<T: Real> LinkInfo<T> {
    pub fn new(neighbor: NodeId, u: Vector3<T>, xi: T, c_pk: Matrix3<T>) -> Result<Self> {
        if (u.norm() - T::one()).abs() > T::lit(1e-9) {
            return Err(invalid("direction must be a unit vector"));
        }
        if !(xi >= T::zero()) || !xi.is_finite() {
            return Err(invalid("ERC must be finite and nonnegative"));
        }
        linalg::check_covariance(&linalg::to_dyn(&c_pk))?;
        let rho = (xi * (u.transpose() * c_pk * u)[0]).max(T::zero());
        Ok(Self { neighbor, u, xi, c_pk, rho })
    }

    /// Builds the link from the two position means.
    pub fn from_estimates(
        neighbor: NodeId,
        mu_j: &Vector3<T>,
        mu_k: &Vector3<T>,
        xi: T,
        c_pk: Matrix3<T>,
    ) -> Result<Self> {
        Self::new(neighbor, unit_direction(mu_j, mu_k)?, xi, c_pk)
    }
}

/// Information intensity `č(m) = m ξ / (1 + m ρ)` of `m` measurements over a
/// link. `m` is real-valued so the same function serves the relaxation.
pub fn info_intensity<T: Real>(m: T, link: &LinkInfo<T>) -> T {
    if m <= T::zero() {
        return T::zero();
    }
    m * link.xi / (T::one() + m * link.rho)
}

/// `dč/dm = ξ / (1 + m ρ)²`.
fn info_intensity_slope<T: Real>(m: T, link: &LinkInfo<T>) -> T {
    let d = T::one() + m.max(T::zero()) * link.rho;
    link.xi / (d * d)
}

/// Input to node prioritization: the agent's position covariance, its links
/// and the total measurement budget `M`.
///
/// Links are kept sorted by neighbor id; allocation vectors are indexed in
/// that order.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem<T: Real> {
    pub c_pj: Matrix3<T>,
    pub links: Vec<LinkInfo<T>>,
    pub budget: u32,
    information: Matrix3<T>,
}

impl<T: Real> AllocationProblem<T> {
    pub fn new(c_pj: Matrix3<T>, mut links: Vec<LinkInfo<T>>, budget: u32) -> Result<Self> {
        linalg::check_covariance(&linalg::to_dyn(&c_pj))?;
        let mut seen = BTreeSet::new();
        if let Some(dup) = links.iter().find(|l| !seen.insert(l.neighbor)) {
            return Err(invalid(format!("duplicate link to {}", dup.neighbor)));
        }
        links.sort_by_key(|l| l.neighbor);
        let information = match c_pj.cholesky() {
            Some(ch) => ch.inverse(),
            None if c_pj.trace() > T::zero() => (c_pj + Matrix3::identity() * T::lit(COVARIANCE_RIDGE))
                .cholesky()
                .map(|ch| ch.inverse())
                .ok_or_else(|| Error::NumericFailure("agent position covariance is singular".into()))?,
            None => return Err(Error::NumericFailure("agent position covariance is zero".into())),
        };
        Ok(Self { c_pj, links, budget, information })
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// `C_pj^-1 + Σ č_k u_k u_k^T`.
    fn information_with(&self, m: &[T]) -> Matrix3<T> {
        let mut j = self.information;
        for (link, &mk) in self.links.iter().zip(m) {
            j += link.u * link.u.transpose() * info_intensity(mk, link);
        }
        j
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.links.len() {
            return Err(Error::DimensionMismatch { expected: self.links.len(), actual: len });
        }
        Ok(())
    }

    /// `tr Č(m)` for a real-valued allocation.
    pub fn objective(&self, m: &[T]) -> Result<T> {
        Ok(predicted_covariance(self, m)?.trace())
    }

    pub fn objective_counts(&self, m: &[u32]) -> Result<T> {
        self.objective(&counts_to_real(m))
    }

    /// Gradient of `tr Č(m)`: `-č'_k(m_k) u_k^T Č² u_k`.
    fn gradient(&self, m: &[T]) -> Result<(T, Vec<T>)> {
        let c = predicted_covariance(self, m)?;
        let c2 = c * c;
        let g = self
            .links
            .iter()
            .zip(m)
            .map(|(l, &mk)| -(info_intensity_slope(mk, l) * (l.u.transpose() * c2 * l.u)[0]))
            .collect();
        Ok((c.trace(), g))
    }
}

fn counts_to_real<T: Real>(m: &[u32]) -> Vec<T> {
    m.iter().map(|&v| T::from_count(v as usize)).collect()
}

/// Predicted agent position covariance `Č(m)` after the allocated
/// measurements.
pub fn predicted_covariance<T: Real>(problem: &AllocationProblem<T>, m: &[T]) -> Result<Matrix3<T>> {
    problem.check_len(m.len())?;
    if m.iter().any(|v| !(*v >= T::zero())) {
        return Err(invalid("measurement counts must be nonnegative"));
    }
    if m.iter().all(|v| *v == T::zero()) {
        return Ok(problem.c_pj);
    }
    let mut c = problem
        .information_with(m)
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| Error::NumericFailure("information matrix is singular".into()))?;
    linalg::symmetrize(&mut c);
    Ok(c)
}

pub fn predicted_covariance_counts<T: Real>(problem: &AllocationProblem<T>, m: &[u32]) -> Result<Matrix3<T>> {
    predicted_covariance(problem, &counts_to_real(m))
}

/// Potential trace reduction `υ = tr C_pj - tr Č(m)`.
pub fn trace_reduction<T: Real>(problem: &AllocationProblem<T>, m: &[u32]) -> Result<T> {
    let after = predicted_covariance_counts(problem, m)?;
    Ok((problem.c_pj.trace() - after.trace()).max(T::zero()))
}

/// Total position-trace increase `δ` of the non-anchor subnetwork members
/// while the channel is held for `dt_j`:
/// `Σ_k tr{[A C_k A^T + Cw - C_k]_pos}`.
///
/// Negative per-member terms are summed as they are.
pub fn trace_increase<T: Real, M: LinearMotion<T> + ?Sized>(
    members: &[StateMatrix<T>],
    motion: &M,
    dt_j: T,
) -> Result<T> {
    let (a, cw) = motion.matrices(dt_j)?;
    let mut total = T::zero();
    for c in members {
        let delta = a * c * a.transpose() + cw - c;
        total += delta.fixed_view::<3, 3>(0, 0).trace();
    }
    Ok(total)
}

/// What node activation needs beyond the allocation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationInputs<T: Real> {
    /// Proposed measurement counts, aligned with the problem's links.
    pub proposal: Vec<u32>,
    /// Full-state covariances of `{j} ∪ N_j` without anchors, own first.
    pub members: Vec<StateMatrix<T>>,
    /// Channel-hold time `T_m · Σ m_k`.
    pub dt_j: T,
}

impl<T: Real> ActivationInputs<T> {
    pub fn new(proposal: Vec<u32>, members: Vec<StateMatrix<T>>, measurement_airtime: T) -> Result<Self> {
        if !(measurement_airtime > T::zero()) {
            return Err(invalid("measurement airtime must be positive"));
        }
        let total: u64 = proposal.iter().map(|&v| v as u64).sum();
        let dt_j = measurement_airtime * T::from_count(total as usize);
        Ok(Self { proposal, members, dt_j })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Activate,
    StaySilent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HtnaDecision<T: Real> {
    pub activation: Activation,
    /// `υ`
    pub reduction: T,
    /// `δ`
    pub increase: T,
}

/// Activate iff the agent's own trace reduction exceeds the subnetwork's
/// trace increase during the channel hold. The caller has already sensed an
/// idle channel.
pub fn htna_decide<T: Real, M: LinearMotion<T> + ?Sized>(
    inputs: &ActivationInputs<T>,
    problem: &AllocationProblem<T>,
    motion: &M,
) -> Result<HtnaDecision<T>> {
    let reduction = trace_reduction(problem, &inputs.proposal)?;
    let increase = trace_increase(&inputs.members, motion, inputs.dt_j)?;
    let activation = if reduction > increase { Activation::Activate } else { Activation::StaySilent };
    Ok(HtnaDecision { activation, reduction, increase })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T: Real> {
    pub max_iters: usize,
    /// Bound on the scale-free projected-gradient residual.
    pub tol: T,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self { max_iters: 20_000, tol: T::lit(1e-8) }
    }
}

/// Solution of the continuous relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation<T: Real> {
    pub m: Vec<T>,
    pub objective: T,
    pub residual: T,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult<T: Real> {
    pub m: Vec<u32>,
    /// `tr Č(m)` of the integer allocation.
    pub objective: T,
    pub relaxed_objective: Option<T>,
    /// Set when the relaxation did not converge and uniform allocation was
    /// used instead.
    pub fallback: bool,
}

impl<T: Real> AllocationResult<T> {
    pub fn total(&self) -> u32 {
        self.m.iter().sum()
    }
}

/// Euclidean projection onto `{x >= 0, Σ x <= cap}`.
fn project_capped_simplex<T: Real>(x: &[T], cap: T) -> Vec<T> {
    let clipped: Vec<T> = x.iter().map(|v| v.max(T::zero())).collect();
    let sum = clipped.iter().fold(T::zero(), |a, b| a + *b);
    if sum <= cap {
        return clipped;
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut acc = T::zero();
    let mut tau = T::zero();
    for (i, v) in sorted.iter().enumerate() {
        acc += *v;
        let t = (acc - cap) / T::from_count(i + 1);
        if *v - t > T::zero() {
            tau = t;
        }
    }
    x.iter().map(|v| (*v - tau).max(T::zero())).collect()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn stationarity<T: Real>(x: &[T], g: &[T], cap: T) -> T {
    let scale = g.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if scale == T::zero() {
        return T::zero();
    }
    let step: Vec<T> = x.iter().zip(g).map(|(xi, gi)| *xi - *gi / scale).collect();
    project_capped_simplex(&step, cap)
        .iter()
        .zip(x)
        .fold(T::zero(), |a, (p, xi)| a.max((*p - *xi).abs()))
}

/// Minimizes `tr Č(m)` over `{m >= 0, Σ m <= M}` by projected gradient with
/// Barzilai-Borwein steps and Armijo backtracking. The objective is convex
/// there: `č` is concave in `m` and `tr(J^-1)` is convex and decreasing in `J`.
pub fn solve_relaxation<T: Real>(problem: &AllocationProblem<T>, options: &SolverOptions<T>) -> Result<Relaxation<T>> {
    let n = problem.len();
    let cap = T::from_count(problem.budget as usize);
    if n == 0 || problem.budget == 0 {
        let m = vec![T::zero(); n];
        return Ok(Relaxation { objective: problem.c_pj.trace(), m, residual: T::zero(), iterations: 0, converged: true });
    }
    let mut x = vec![cap / T::from_count(n); n];
    let (mut f, mut g) = problem.gradient(&x)?;
    let mut step = T::one();
    let gmax = g.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if gmax > T::zero() {
        step = cap / gmax;
    }
    let armijo = T::lit(1e-4);
    // Nonmonotone reference over recent objective values, plus a rounding
    // allowance: close to the optimum the decrease falls below what f can
    // resolve while the projected gradient is still above tolerance.
    let mut history = std::collections::VecDeque::from([f]);
    let mut residual = stationarity(&x, &g, cap);
    let mut iterations = 0;
    while residual > options.tol && iterations < options.max_iters {
        iterations += 1;
        let reference = history.iter().fold(f, |a, b| a.max(*b));
        let slack = T::lit(64.0) * T::default_epsilon() * f.abs();
        let mut t = step;
        let (x_new, f_new, g_new) = loop {
            let trial: Vec<T> = x.iter().zip(&g).map(|(xi, gi)| *xi - *gi * t).collect();
            let cand = project_capped_simplex(&trial, cap);
            let dx: Vec<T> = cand.iter().zip(&x).map(|(a, b)| *a - *b).collect();
            let (fc, gc) = problem.gradient(&cand)?;
            if fc <= reference + armijo * dot(&g, &dx) + slack || t < T::lit(1e-30) {
                break (cand, fc, gc);
            }
            t *= T::lit(0.5);
        };
        let s: Vec<T> = x_new.iter().zip(&x).map(|(a, b)| *a - *b).collect();
        let y: Vec<T> = g_new.iter().zip(&g).map(|(a, b)| *a - *b).collect();
        let ss = dot(&s, &s);
        let sy = dot(&s, &y);
        step = if sy > T::zero() { ss / sy } else { t * T::lit(2.0) };
        x = x_new;
        f = f_new;
        g = g_new;
        residual = stationarity(&x, &g, cap);
        if ss == T::zero() {
            break;
        }
        history.push_back(f);
        if history.len() > 10 {
            history.pop_front();
        }
    }
    Ok(Relaxation { m: x, objective: f, residual, iterations, converged: residual <= options.tol })
}

/// Largest-remainder rounding that never exceeds the budget.
fn largest_remainder<T: Real>(x: &[T], budget: u32) -> Vec<u32> {
    let sum = x.iter().fold(T::zero(), |a, b| a + *b);
    let total = ((sum + T::lit(1e-6)).floor().to_u64().unwrap_or(0) as u32).min(budget);
    let mut m: Vec<u32> = x
        .iter()
        .map(|v| (*v + T::lit(1e-9)).floor().max(T::zero()).to_u32().unwrap_or(0))
        .collect();
    let assigned: u32 = m.iter().sum();
    if assigned > total {
        // Only possible through the 1e-9 nudge; undo from the smallest entries.
        let mut excess = assigned - total;
        let mut order: Vec<usize> = (0..m.len()).collect();
        order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
        for i in order {
            while excess > 0 && m[i] > 0 {
                m[i] -= 1;
                excess -= 1;
            }
        }
        return m;
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    let frac = |i: usize| x[i] - x[i].floor();
    order.sort_by(|&a, &b| frac(b).partial_cmp(&frac(a)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    for &i in order.iter().take((total - assigned) as usize) {
        m[i] += 1;
    }
    m
}

/// Greedy single-unit moves (add one unit, or shift one unit between links)
/// applied while any of them strictly lowers the objective.
fn improve_by_exchange<T: Real>(problem: &AllocationProblem<T>, mut m: Vec<u32>) -> Result<(Vec<u32>, T)> {
    let mut best = problem.objective_counts(&m)?;
    loop {
        let mut candidate: Option<(Vec<u32>, T)> = None;
        let consider = |trial: Vec<u32>, cand: &mut Option<(Vec<u32>, T)>| -> Result<()> {
            let obj = problem.objective_counts(&trial)?;
            let bar = cand.as_ref().map_or(best, |c| c.1);
            if obj < bar - bar.abs() * T::lit(1e-12) {
                *cand = Some((trial, obj));
            }
            Ok(())
        };
        let total: u32 = m.iter().sum();
        if total < problem.budget {
            for k in 0..m.len() {
                let mut t = m.clone();
                t[k] += 1;
                consider(t, &mut candidate)?;
            }
        }
        for from in 0..m.len() {
            if m[from] == 0 {
                continue;
            }
            for to in 0..m.len() {
                if to == from {
                    continue;
                }
                let mut t = m.clone();
                t[from] -= 1;
                t[to] += 1;
                consider(t, &mut candidate)?;
            }
        }
        match candidate {
            Some((next, obj)) => {
                m = next;
                best = obj;
            }
            None => return Ok((m, best)),
        }
    }
}

/// Budget split as evenly as possible, extra units to the lowest ids.
pub fn uniform_allocation(links: usize, budget: u32) -> Vec<u32> {
    if links == 0 {
        return Vec::new();
    }
    let base = budget / links as u32;
    let extra = (budget % links as u32) as usize;
    (0..links).map(|i| base + u32::from(i < extra)).collect()
}

/// Measurement allocation minimizing the predicted position-covariance trace
/// under the budget: continuous relaxation, rounding, then greedy unit
/// exchanges.
pub fn cpnp_allocate<T: Real>(problem: &AllocationProblem<T>, options: &SolverOptions<T>) -> Result<AllocationResult<T>> {
    let relaxed = solve_relaxation(problem, options)?;
    if !relaxed.converged {
        let m = uniform_allocation(problem.len(), problem.budget);
        let objective = problem.objective_counts(&m)?;
        return Ok(AllocationResult { m, objective, relaxed_objective: None, fallback: true });
    }
    let rounded = largest_remainder(&relaxed.m, problem.budget);
    let (m, objective) = improve_by_exchange(problem, rounded)?;
    Ok(AllocationResult { m, objective, relaxed_objective: Some(relaxed.objective), fallback: false })
}

/// Largest instance [`brute_force_allocate`] accepts.
pub const BRUTE_FORCE_MAX_LINKS: usize = 5;
pub const BRUTE_FORCE_MAX_BUDGET: u32 = 10;

/// Exact integer optimum by enumeration of every `m` with `Σ m <= M`.
/// Enumeration is lexicographic and only strict improvements replace the
/// incumbent, so ties resolve to the lexicographically smallest vector.
pub fn brute_force_allocate<T: Real>(problem: &AllocationProblem<T>) -> Result<AllocationResult<T>> {
    if problem.len() > BRUTE_FORCE_MAX_LINKS || problem.budget > BRUTE_FORCE_MAX_BUDGET {
        return Err(invalid(format!(
            "brute force limited to {BRUTE_FORCE_MAX_LINKS} links and budget {BRUTE_FORCE_MAX_BUDGET}"
        )));
    }
    let n = problem.len();
    let mut current = vec![0u32; n];
    let mut best_m = current.clone();
    let mut best = problem.objective_counts(&current)?;
    fn next(m: &mut [u32], budget: u32) -> bool {
        // Lexicographic successor among vectors with sum <= budget.
        let sum: u32 = m.iter().sum();
        if let Some(last) = m.len().checked_sub(1) {
            if sum < budget {
                m[last] += 1;
                return true;
            }
            let mut i = last;
            loop {
                if i == 0 {
                    return false;
                }
                let head: u32 = m[..i].iter().sum();
                m[i..].iter_mut().for_each(|v| *v = 0);
                if head < budget {
                    m[i - 1] += 1;
                    return true;
                }
                i -= 1;
            }
        }
        false
    }
    while next(&mut current, problem.budget) {
        let obj = problem.objective_counts(&current)?;
        if obj < best - best.abs() * T::lit(1e-12) {
            best = obj;
            best_m.clone_from(&current);
        }
    }
    Ok(AllocationResult { m: best_m, objective: best, relaxed_objective: None, fallback: false })
}
