//! Optical Hamiltonians, their flows and tangent flows, short-time
//! generating functions by shooting, and the decomposition of the time-1 map
//! into a chain of convex twist maps.
//!
//! Hamilton's equations are q' = H_p, p' = -H_q, i.e. z' = J^T grad H with
//! J = [[0, -I], [I, 0]]; the tangent flow is U' = J^T Hess(H) U.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genfun::{certify_convexity, CosineSeries, GeneratingFunction, Potential, SamplingSpec, SharedGenFun, TwistConstants};
use crate::linalg::{self, op_norm, sym_eigenvalues, sym_part};
use crate::scalar::Real;
use crate::torus::{symplectic_j, OrbitClass, PhasePoint};
use crate::twistmap::{compose, ExplicitMap, MapChain, TwistMap};

/// A time-dependent Hamiltonian H(q, p, t), 1-periodic in each q_i.
pub trait HamiltonianModel<T: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn label(&self) -> String;
    fn value(&self, q: &DVector<T>, p: &DVector<T>, t: T) -> T;
    /// (H_q, H_p), length 2n.
    fn gradient(&self, q: &DVector<T>, p: &DVector<T>, t: T) -> DVector<T>;
    /// [[H_qq, H_qp], [H_pq, H_pp]].
    fn hessian(&self, q: &DVector<T>, p: &DVector<T>, t: T) -> DMatrix<T>;
}

pub type SharedHamiltonian<T> = Arc<dyn HamiltonianModel<T>>;

/// H = |p|^2 / 2 + V(q).
#[derive(Clone)]
pub struct MechanicalHamiltonian<T: Real> {
    potential: Arc<dyn Potential<T>>,
    label: String,
}

impl<T: Real> MechanicalHamiltonian<T> {
    pub fn new(potential: Arc<dyn Potential<T>>, label: impl Into<String>) -> Self {
        Self { potential, label: label.into() }
    }
}

impl<T: Real> HamiltonianModel<T> for MechanicalHamiltonian<T> {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, q: &DVector<T>, p: &DVector<T>, _t: T) -> T {
        p.norm_squared() * T::lit(0.5) + self.potential.value(q)
    }

    fn gradient(&self, q: &DVector<T>, p: &DVector<T>, _t: T) -> DVector<T> {
        let n = self.dim();
        let gq = self.potential.gradient(q);
        DVector::from_fn(2 * n, |i, _| if i < n { gq[i] } else { p[i - n] })
    }

    fn hessian(&self, q: &DVector<T>, _p: &DVector<T>, _t: T) -> DMatrix<T> {
        let n = self.dim();
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        h.view_mut((0, 0), (n, n)).copy_from(&self.potential.hessian(q));
        h.view_mut((n, n), (n, n)).fill_with_identity();
        h
    }
}

/// H = |p|^2 / 2 on T*T^n.
pub fn free_particle<T: Real>(n: usize) -> MechanicalHamiltonian<T> {
    MechanicalHamiltonian::new(Arc::new(CosineSeries::zero(n)), "free")
}

/// H = p^2 / 2 + s / (4 pi^2) cos(2 pi q); for s < 0 the elliptic point is q = 0.
pub fn pendulum<T: Real>(s: T) -> MechanicalHamiltonian<T> {
    MechanicalHamiltonian::new(Arc::new(CosineSeries::standard(s)), format!("pendulum(s={})", s.to_f64_lossy()))
}

/// Which auxiliary quantities ride along with the base trajectory.
#[derive(Clone, Copy)]
struct Extras {
    tangent: bool,
    action: bool,
}

/// Layout: q (n), p (n), action (1), U (4n^2, column-major).
fn rhs<T: Real>(hm: &dyn HamiltonianModel<T>, n: usize, ex: Extras, t: T, y: &DVector<T>) -> DVector<T> {
    let q = y.rows(0, n).into_owned();
    let p = y.rows(n, n).into_owned();
    let g = hm.gradient(&q, &p, t);
    let mut dy = DVector::zeros(y.len());
    for i in 0..n {
        dy[i] = g[n + i];
        dy[n + i] = -g[i];
    }
    if ex.action {
        dy[2 * n] = p.dot(&g.rows(n, n)) - hm.value(&q, &p, t);
    }
    if ex.tangent {
        let h = hm.hessian(&q, &p, t);
        let a = symplectic_j::<T>(n).transpose() * h;
        let m = 2 * n;
        let u = DMatrix::from_column_slice(m, m, &y.as_slice()[2 * n + 1..]);
        let du = a * u;
        dy.rows_mut(2 * n + 1, m * m).copy_from_slice(du.as_slice());
    }
    dy
}

/// Classical RK4 from t0 to t1 in `steps` equal steps; `observe` sees every
/// state including the initial one.
fn rk4<T: Real>(
    hm: &dyn HamiltonianModel<T>,
    ex: Extras,
    y0: DVector<T>,
    t0: T,
    t1: T,
    steps: usize,
    mut observe: impl FnMut(T, &DVector<T>),
) -> Result<DVector<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integration needs at least one step".into()));
    }
    let n = hm.dim();
    let h = (t1 - t0) / T::from_count(steps);
    let half = h * T::lit(0.5);
    let sixth = h / T::lit(6.0);
    let mut y = y0;
    observe(t0, &y);
    for k in 0..steps {
        let t = t0 + h * T::from_count(k);
        let k1 = rhs(hm, n, ex, t, &y);
        let k2 = rhs(hm, n, ex, t + half, &(&y + &k1 * half));
        let k3 = rhs(hm, n, ex, t + half, &(&y + &k2 * half));
        let k4 = rhs(hm, n, ex, t + h, &(&y + &k3 * h));
        y += (k1 + (k2 + k3) * T::lit(2.0) + k4) * sixth;
        if !y.iter().all(|v| v.finite()) {
            return Err(Error::NonFinite("Hamiltonian flow state"));
        }
        observe(t + h, &y);
    }
    Ok(y)
}

fn initial_state<T: Real>(z: &PhasePoint<T>, ex: Extras) -> DVector<T> {
    let n = z.dim();
    let m = 2 * n;
    let len = 2 * n + 1 + if ex.tangent { m * m } else { 0 };
    let mut y = DVector::zeros(len);
    y.rows_mut(0, n).copy_from(&z.q);
    y.rows_mut(n, n).copy_from(&z.p);
    if ex.tangent {
        for i in 0..m {
            y[2 * n + 1 + i * m + i] = T::one();
        }
    }
    y
}

fn split_state<T: Real>(y: &DVector<T>, n: usize, tangent: bool) -> (PhasePoint<T>, T, Option<DMatrix<T>>) {
    let z = PhasePoint { q: y.rows(0, n).into_owned(), p: y.rows(n, n).into_owned() };
    let m = 2 * n;
    let u = tangent.then(|| DMatrix::from_column_slice(m, m, &y.as_slice()[2 * n + 1..]));
    (z, y[2 * n], u)
}

fn check_dim<T: Real>(hm: &dyn HamiltonianModel<T>, z: &PhasePoint<T>) -> Result<()> {
    if z.dim() != hm.dim() {
        return Err(Error::DimensionMismatch { expected: hm.dim(), found: z.dim() });
    }
    Ok(())
}

/// The time-(t0 -> t1) map at z.
pub fn flow<T: Real>(hm: &dyn HamiltonianModel<T>, z: &PhasePoint<T>, t0: T, t1: T, steps: usize) -> Result<PhasePoint<T>> {
    check_dim(hm, z)?;
    let ex = Extras { tangent: false, action: false };
    let y = rk4(hm, ex, initial_state(z, ex), t0, t1, steps, |_, _| {})?;
    Ok(split_state(&y, hm.dim(), false).0)
}

/// Endpoint, tangent map and action integral of p dq - H dt along one trajectory.
#[derive(Debug, Clone)]
pub struct FlowSolution<T: Real> {
    pub end: PhasePoint<T>,
    pub tangent: DMatrix<T>,
    pub action: T,
}

pub fn flow_with_tangent<T: Real>(hm: &dyn HamiltonianModel<T>, z: &PhasePoint<T>, t0: T, t1: T, steps: usize) -> Result<FlowSolution<T>> {
    check_dim(hm, z)?;
    let ex = Extras { tangent: true, action: true };
    let y = rk4(hm, ex, initial_state(z, ex), t0, t1, steps, |_, _| {})?;
    let (end, action, u) = split_state(&y, hm.dim(), true);
    Ok(FlowSolution { end, tangent: u.expect("tangent requested"), action })
}

/// Samples of U(t) along a trajectory, U(t0) = I.
#[derive(Debug, Clone)]
pub struct TangentFlowResult<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<PhasePoint<T>>,
    pub matrices: Vec<DMatrix<T>>,
}

impl<T: Real> TangentFlowResult<T> {
    pub fn final_matrix(&self) -> &DMatrix<T> {
        self.matrices.last().expect("at least the initial sample")
    }

    /// max over samples of ||U^T J U - J||_F.
    pub fn symplecticity_residual(&self) -> T {
        let n = self.states[0].dim();
        let j = symplectic_j::<T>(n);
        self.matrices.iter().fold(T::zero(), |acc, u| acc.max((u.transpose() * &j * u - &j).norm()))
    }
}

pub fn tangent_flow<T: Real>(hm: &dyn HamiltonianModel<T>, z: &PhasePoint<T>, t0: T, t1: T, steps: usize) -> Result<TangentFlowResult<T>> {
    check_dim(hm, z)?;
    let n = hm.dim();
    let ex = Extras { tangent: true, action: false };
    let mut out = TangentFlowResult { times: Vec::new(), states: Vec::new(), matrices: Vec::new() };
    rk4(hm, ex, initial_state(z, ex), t0, t1, steps, |t, y| {
        let (s, _, u) = split_state(y, n, true);
        out.times.push(t);
        out.states.push(s);
        out.matrices.push(u.expect("tangent requested"));
    })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub k_bound: f64,
    /// sup of ||Hess H|| seen along the trajectory.
    pub sampled_hessian_norm: f64,
    /// max over samples of ||U(t) - I|| / (K |t - t0| e^{K |t - t0|}).
    pub max_ratio: f64,
    pub samples: usize,
}

/// Checks ||U(t) - I|| <= K |t - t0| e^{K |t - t0|} at every step of the
/// tangent flow.
pub fn gronwall_check<T: Real>(
    hm: &dyn HamiltonianModel<T>,
    z: &PhasePoint<T>,
    t0: T,
    t1: T,
    k_bound: f64,
    steps: usize,
) -> Result<GronwallReport> {
    let tf = tangent_flow(hm, z, t0, t1, steps)?;
    let n = hm.dim();
    let id = DMatrix::<T>::identity(2 * n, 2 * n);
    let mut sampled = 0.0f64;
    let mut max_ratio = 0.0f64;
    for ((t, s), u) in tf.times.iter().zip(&tf.states).zip(&tf.matrices) {
        sampled = sampled.max(op_norm(&hm.hessian(&s.q, &s.p, *t)).to_f64_lossy());
        let lhs = op_norm(&(u - &id)).to_f64_lossy();
        let dt = (*t - t0).abs().to_f64_lossy();
        let rhs = k_bound * dt * (k_bound * dt).exp();
        let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
        if !(ratio <= 1.0) {
            return Err(Error::BoundViolation { what: "Gronwall estimate on the tangent flow".into(), slack: rhs - lhs, at: vec![dt] });
        }
        max_ratio = max_ratio.max(ratio);
    }
    if sampled > k_bound {
        return Err(Error::BoundViolation { what: "Hessian norm along trajectory exceeds K".into(), slack: k_bound - sampled, at: Vec::new() });
    }
    Ok(GronwallReport { k_bound, sampled_hessian_norm: sampled, max_ratio, samples: tf.times.len() })
}

/// K bounds ||Hess H||; C < H_pp < 1/C in the quadratic-form sense, both on
/// samples over T^n x [-p_max, p_max]^n x [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalBounds {
    pub k: f64,
    pub c: f64,
    pub p_max: f64,
    pub samples: usize,
}

impl OpticalBounds {
    pub fn new(k: f64, c: f64, p_max: f64) -> Result<Self> {
        if !(k > 0.0 && c > 0.0 && c <= 1.0 && p_max > 0.0) {
            return Err(Error::InvalidArgument(format!("optical bounds need K > 0, 0 < C <= 1, p_max > 0 (K={k}, C={c}, p_max={p_max})")));
        }
        Ok(Self { k, c, p_max, samples: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticalSampling {
    pub per_axis: usize,
    /// Cap on the (q, p) grid size; per_axis is reduced to fit.
    pub max_points: usize,
    pub time_samples: usize,
    pub p_max: f64,
    /// Relative safety margin applied to K (inflated) and C (deflated).
    pub margin: f64,
}

impl Default for OpticalSampling {
    fn default() -> Self {
        Self { per_axis: 16, max_points: 1 << 16, time_samples: 5, p_max: 2.0, margin: 0.05 }
    }
}

/// Default momentum window 4 max|m/d| + 2 over the requested classes.
pub fn default_p_max(classes: &[OrbitClass]) -> f64 {
    let rot = classes
        .iter()
        .flat_map(|c| c.m.iter().map(move |&mk| (mk as f64 / c.d as f64).abs()))
        .fold(0.0f64, f64::max);
    4.0 * rot + 2.0
}

pub fn estimate_optical_bounds<T: Real>(hm: &dyn HamiltonianModel<T>, sampling: &OpticalSampling) -> Result<OpticalBounds> {
    let n = hm.dim();
    let mut k = sampling.per_axis.max(2);
    while k > 2 && (k as f64).powi(2 * n as i32) > sampling.max_points as f64 {
        k -= 1;
    }
    let times: Vec<f64> = match sampling.time_samples {
        0 | 1 => vec![0.0],
        m => (0..m).map(|i| i as f64 / (m - 1) as f64).collect(),
    };
    let pm = sampling.p_max;
    let points: Vec<(DVector<T>, DVector<T>, T)> = (0..k.pow(2 * n as u32))
        .flat_map(|idx| {
            let mut rem = idx;
            let q = DVector::from_fn(n, |_, _| {
                let v = (rem % k) as f64 / k as f64;
                rem /= k;
                T::lit(v)
            });
            let p = DVector::from_fn(n, |_, _| {
                let v = -pm + 2.0 * pm * (rem % k) as f64 / (k - 1) as f64;
                rem /= k;
                T::lit(v)
            });
            times.iter().map(move |&t| (q.clone(), p.clone(), T::lit(t))).collect::<Vec<_>>()
        })
        .collect();
    let per: Vec<(f64, f64, f64)> = points
        .par_iter()
        .map(|(q, p, t)| {
            let h = hm.hessian(q, p, *t);
            let hpp = sym_part(&h.view((n, n), (n, n)).into_owned());
            let eig = sym_eigenvalues(&hpp);
            (op_norm(&h).to_f64_lossy(), eig[0].to_f64_lossy(), eig[n - 1].to_f64_lossy())
        })
        .collect();
    let mut sup = 0.0f64;
    let mut c = f64::INFINITY;
    for (i, (norm, lo, hi)) in per.iter().enumerate() {
        if !(norm.is_finite() && lo.is_finite() && hi.is_finite()) {
            return Err(Error::NonFinite("Hamiltonian Hessian sample"));
        }
        if *lo <= 0.0 {
            let (q, p, t) = &points[i];
            return Err(Error::NotOptical(format!(
                "H_pp has eigenvalue {lo:.3e} <= 0 at q={:?}, p={:?}, t={}",
                q.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>(),
                p.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>(),
                t.to_f64_lossy()
            )));
        }
        sup = sup.max(*norm);
        c = c.min(*lo).min(1.0 / hi);
    }
    let mut bounds = OpticalBounds::new(sup.max(f64::MIN_POSITIVE) * (1.0 + sampling.margin), c * (1.0 - sampling.margin), pm)?;
    bounds.samples = points.len();
    Ok(bounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwistBlockReport {
    pub epsilon: f64,
    /// Upper-right n x n block of U(epsilon), i.e. dq(epsilon)/dp.
    pub b: Vec<Vec<f64>>,
    /// Extreme eigenvalues of sym(b).
    pub eig_min: f64,
    pub eig_max: f64,
    pub bound_lo: f64,
    pub bound_hi: f64,
    /// ||b^{-1}||.
    pub inverse_norm: f64,
    pub within_window: bool,
}

/// Reads b off the tangent flow over [t_start, t_start + epsilon] and compares
/// its spectrum with (eps C - K eps^2, eps/C + K eps^2).
pub fn twist_block<T: Real>(
    hm: &dyn HamiltonianModel<T>,
    z: &PhasePoint<T>,
    t_start: T,
    epsilon: f64,
    bounds: &OpticalBounds,
    steps: usize,
) -> Result<TwistBlockReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = hm.dim();
    let sol = flow_with_tangent(hm, z, t_start, t_start + T::lit(epsilon), steps)?;
    let b = sol.tangent.view((0, n), (n, n)).into_owned();
    let eig = sym_eigenvalues(&sym_part(&b));
    let (eig_min, eig_max) = (eig[0].to_f64_lossy(), eig[n - 1].to_f64_lossy());
    if !(eig_min > 0.0) {
        return Err(Error::PositivityFailure { epsilon, eig_min });
    }
    let (k, c) = (bounds.k, bounds.c);
    let bound_lo = epsilon * c - k * epsilon * epsilon;
    let bound_hi = epsilon / c + k * epsilon * epsilon;
    Ok(TwistBlockReport {
        epsilon,
        b: (0..n).map(|i| (0..n).map(|j| b[(i, j)].to_f64_lossy()).collect()).collect(),
        eig_min,
        eig_max,
        bound_lo,
        bound_hi,
        inverse_norm: linalg::inverse_op_norm(&b).to_f64_lossy(),
        within_window: bound_lo <= eig_min && eig_max <= bound_hi,
    })
}

/// N = ceil(safety K / C), bumped until eps C - K eps^2 > 0 for eps = 1/N.
pub fn choose_n(bounds: &OpticalBounds, safety: f64) -> Result<usize> {
    if !(safety >= 1.0) {
        return Err(Error::InvalidArgument(format!("safety factor must be >= 1, got {safety}")));
    }
    let mut n = ((safety * bounds.k / bounds.c).ceil() as usize).max(1);
    while {
        let eps = 1.0 / n as f64;
        eps * bounds.c - bounds.k * eps * eps <= 0.0
    } {
        n += 1;
    }
    Ok(n)
}

/// Tolerances of the shooting solve behind a numeric generating function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShootingSettings {
    pub steps: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Entries beyond this are dropped wholesale.
    pub cache_capacity: usize,
}

impl Default for ShootingSettings {
    fn default() -> Self {
        Self { steps: 64, tol: 1e-13, max_iter: 40, cache_capacity: 200_000 }
    }
}

/// The boundary-value trajectory from q at t_start to Q at t_start + epsilon.
#[derive(Debug, Clone)]
pub struct BvpSolution<T: Real> {
    pub p0: DVector<T>,
    pub p1: DVector<T>,
    pub action: T,
    pub tangent: DMatrix<T>,
}

/// The generating function of the flow over a short time stint, evaluated by
/// shooting on the initial momentum.
pub struct FlowGenFun<T: Real> {
    hm: SharedHamiltonian<T>,
    t_start: T,
    epsilon: T,
    settings: ShootingSettings,
    cache: Mutex<HashMap<Vec<u64>, BvpSolution<T>>>,
}

pub fn short_time_genfun<T: Real>(hm: SharedHamiltonian<T>, t_start: T, epsilon: T, settings: ShootingSettings) -> Result<FlowGenFun<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::InvalidArgument("stint length must be positive".into()));
    }
    Ok(FlowGenFun { hm, t_start, epsilon, settings, cache: Mutex::new(HashMap::new()) })
}

impl<T: Real> FlowGenFun<T> {
    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn t_start(&self) -> T {
        self.t_start
    }

    /// Exact keys keep results independent of evaluation order.
    fn key(q: &DVector<T>, big_q: &DVector<T>) -> Vec<u64> {
        q.iter().chain(big_q.iter()).map(|x| x.to_f64_lossy().to_bits()).collect()
    }

    /// Solves q(t_start) = q, q(t_start + eps) = Q by Newton on p0.
    pub fn solve(&self, q: &DVector<T>, big_q: &DVector<T>) -> Result<BvpSolution<T>> {
        let key = Self::key(q, big_q);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let sol = self.shoot(q, big_q)?;
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= self.settings.cache_capacity {
            cache.clear();
        }
        cache.insert(key, sol.clone());
        Ok(sol)
    }

    fn shoot(&self, q: &DVector<T>, big_q: &DVector<T>) -> Result<BvpSolution<T>> {
        let n = q.len();
        let hm = self.hm.as_ref();
        let (t0, t1) = (self.t_start, self.t_start + self.epsilon);
        let naive = (big_q - q) / self.epsilon;
        let mid = (q + big_q) * T::lit(0.5);
        let hpp = hm.hessian(&mid, &naive, t0 + self.epsilon * T::lit(0.5)).view((n, n), (n, n)).into_owned();
        let mut guesses = Vec::new();
        if let Ok(p) = linalg::solve(&hpp, &naive, "H_pp at midpoint") {
            guesses.push(p);
        }
        guesses.push(naive);
        let tol = T::lit(self.settings.tol) * (T::one() + big_q.amax());
        let mut last = f64::INFINITY;
        for p_start in guesses {
            let mut p = p_start;
            let Ok(mut sol) = flow_with_tangent(hm, &PhasePoint { q: q.clone(), p: p.clone() }, t0, t1, self.settings.steps) else {
                continue;
            };
            let mut r = &sol.end.q - big_q;
            for _ in 0..self.settings.max_iter {
                if r.norm() <= tol {
                    break;
                }
                let b = sol.tangent.view((0, n), (n, n)).into_owned();
                let Ok(step) = linalg::solve(&b, &r, "shooting block") else { break };
                let mut lambda = T::one();
                let mut moved = false;
                for _ in 0..30 {
                    let trial = &p - &step * lambda;
                    if let Ok(ts) = flow_with_tangent(hm, &PhasePoint { q: q.clone(), p: trial.clone() }, t0, t1, self.settings.steps) {
                        let rt = &ts.end.q - big_q;
                        if rt.norm() < r.norm() {
                            p = trial;
                            sol = ts;
                            r = rt;
                            moved = true;
                            break;
                        }
                    }
                    lambda *= T::lit(0.5);
                }
                if !moved {
                    break;
                }
            }
            // accept a stall just above tolerance: the residual floor is set by rounding in the flow
            if r.norm() <= tol * T::lit(100.0) {
                return Ok(BvpSolution { p0: p, p1: sol.end.p, action: sol.action, tangent: sol.tangent });
            }
            last = last.min(r.norm().to_f64_lossy());
        }
        Err(Error::ShootingDivergence {
            q: q.iter().map(|x| x.to_f64_lossy()).collect(),
            big_q: big_q.iter().map(|x| x.to_f64_lossy()).collect(),
            residual: last,
        })
    }

    fn blocks(&self, q: &DVector<T>, big_q: &DVector<T>) -> Option<(DMatrix<T>, DMatrix<T>, DMatrix<T>, DMatrix<T>)> {
        let n = q.len();
        let sol = self.solve(q, big_q).ok()?;
        let u = &sol.tangent;
        let a = u.view((0, 0), (n, n)).into_owned();
        let b = u.view((0, n), (n, n)).into_owned();
        let e = u.view((n, n), (n, n)).into_owned();
        let binv = b.try_inverse()?;
        Some((a, binv, e, sol.tangent.clone()))
    }
}

fn nan_vec<T: Real>(n: usize) -> DVector<T> {
    DVector::from_element(n, T::lit(f64::NAN))
}

fn nan_mat<T: Real>(n: usize) -> DMatrix<T> {
    DMatrix::from_element(n, n, T::lit(f64::NAN))
}

/// Derivatives follow from the generating relations p0 = -d1 S, p1 = d2 S and
/// the tangent map [[A, B], [C, E]] of the (discrete) flow:
/// d11 = B^-1 A, d12 = -B^-1, d22 = E B^-1.
impl<T: Real> GeneratingFunction<T> for FlowGenFun<T> {
    fn dim(&self) -> usize {
        self.hm.dim()
    }

    fn label(&self) -> String {
        format!(
            "flow[{}; {}..{}]",
            self.hm.label(),
            self.t_start.to_f64_lossy(),
            (self.t_start + self.epsilon).to_f64_lossy()
        )
    }

    fn value(&self, q: &DVector<T>, big_q: &DVector<T>) -> T {
        self.solve(q, big_q).map(|s| s.action).unwrap_or(T::lit(f64::NAN))
    }

    fn d1(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T> {
        self.solve(q, big_q).map(|s| -s.p0).unwrap_or_else(|_| nan_vec(q.len()))
    }

    fn d2(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T> {
        self.solve(q, big_q).map(|s| s.p1).unwrap_or_else(|_| nan_vec(q.len()))
    }

    fn d11(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        self.blocks(q, big_q).map(|(a, binv, _, _)| binv * a).unwrap_or_else(|| nan_mat(q.len()))
    }

    fn d12(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        self.blocks(q, big_q).map(|(_, binv, _, _)| -binv).unwrap_or_else(|| nan_mat(q.len()))
    }

    fn d22(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        self.blocks(q, big_q).map(|(_, binv, e, _)| e * binv).unwrap_or_else(|| nan_mat(q.len()))
    }
}

/// One stint of the flow as a directly evaluated map.
pub struct FlowStep<T: Real> {
    hm: SharedHamiltonian<T>,
    t0: T,
    t1: T,
    steps: usize,
}

impl<T: Real> FlowStep<T> {
    pub fn new(hm: SharedHamiltonian<T>, t0: T, t1: T, steps: usize) -> Self {
        Self { hm, t0, t1, steps }
    }
}

impl<T: Real> ExplicitMap<T> for FlowStep<T> {
    fn forward(&self, z: &PhasePoint<T>) -> Result<PhasePoint<T>> {
        flow(self.hm.as_ref(), z, self.t0, self.t1, self.steps)
    }

    /// Exact inverse of the discrete forward map: Newton from the backward flow.
    fn inverse(&self, w: &PhasePoint<T>) -> Result<PhasePoint<T>> {
        let mut z = flow(self.hm.as_ref(), w, self.t1, self.t0, self.steps)?;
        let target = w.to_vector();
        let tol = T::lit(1e-14) * (T::one() + target.amax());
        for _ in 0..20 {
            let sol = flow_with_tangent(self.hm.as_ref(), &z, self.t0, self.t1, self.steps)?;
            let r = sol.end.to_vector() - &target;
            if r.norm() <= tol {
                return Ok(z);
            }
            let step = linalg::solve(&sol.tangent, &r, "flow tangent")?;
            z = PhasePoint::from_vector(&(z.to_vector() - step));
        }
        let r = (flow(self.hm.as_ref(), &z, self.t0, self.t1, self.steps)?.to_vector() - &target).norm();
        if r <= tol * T::lit(1e3) {
            return Ok(z);
        }
        Err(Error::NewtonDivergence { iterations: 20, residual: r.to_f64_lossy() })
    }

    fn tangent(&self, z: &PhasePoint<T>) -> Result<DMatrix<T>> {
        Ok(flow_with_tangent(self.hm.as_ref(), z, self.t0, self.t1, self.steps)?.tangent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeSettings {
    pub safety: f64,
    pub shooting: ShootingSettings,
    /// Grid and random sample counts for the per-step convexity certificate;
    /// the displacement box is set from the momentum window of the bounds.
    pub per_axis: usize,
    pub random: usize,
    pub seed: u64,
}

impl Default for DecomposeSettings {
    fn default() -> Self {
        Self { safety: 4.0, shooting: ShootingSettings::default(), per_axis: 16, random: 256, seed: 0x5eed }
    }
}

/// h^1 = (h^{N/N} o (h^{(N-1)/N})^-1) o ... o h^{1/N}, each factor a
/// certified twist map.
#[derive(Debug, Clone)]
pub struct DecompositionPlan<T: Real> {
    pub n_steps: usize,
    pub bounds: OpticalBounds,
    pub maps: Vec<TwistMap<T>>,
}

impl<T: Real> DecompositionPlan<T> {
    pub fn constants(&self) -> Vec<TwistConstants> {
        self.maps.iter().map(|m| m.constants().clone()).collect()
    }

    pub fn chain(&self) -> Result<MapChain<T>> {
        compose(self.maps.clone())
    }

    pub fn generating_functions(&self) -> Vec<SharedGenFun<T>> {
        self.maps.iter().map(|m| m.genfun().clone()).collect()
    }
}

pub fn decompose<T: Real>(hm: SharedHamiltonian<T>, bounds: &OpticalBounds, settings: &DecomposeSettings) -> Result<DecompositionPlan<T>> {
    let n_steps = choose_n(bounds, settings.safety)?;
    let eps = 1.0 / n_steps as f64;
    // displacements reachable in one stint from the momentum window, plus a unit of slack
    let spec = SamplingSpec {
        per_axis: settings.per_axis,
        random: settings.random,
        box_half_width: eps * bounds.p_max / bounds.c + 1.0,
        max_grid: 1 << 16,
        seed: settings.seed,
    };
    let mut maps = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t0 = T::lit(k as f64 * eps);
        let t1 = T::lit((k + 1) as f64 * eps);
        let genfun = Arc::new(short_time_genfun(hm.clone(), t0, t1 - t0, settings.shooting).map_err(|e| e.in_step(k))?);
        let constants = certify_convexity(genfun.as_ref(), &spec).map_err(|e| e.in_step(k))?;
        let step = FlowStep::new(hm.clone(), t0, t1, settings.shooting.steps);
        maps.push(TwistMap::new(genfun, constants)?.with_explicit(Arc::new(step)));
    }
    Ok(DecompositionPlan { n_steps, bounds: *bounds, maps })
}

/// max |H(q + e_i, p, t) - H(q, p, t)| over seeded samples with |p| <= p_max.
/// NaN values count as an infinite defect.
pub fn periodicity_defect<T: Real>(hm: &dyn HamiltonianModel<T>, samples: usize, p_max: f64, seed: u64) -> f64 {
    let n = hm.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let q = DVector::from_fn(n, |_, _| T::lit(rng.random::<f64>()));
        let p = DVector::from_fn(n, |_, _| T::lit(rng.random_range(-p_max..=p_max)));
        let t = T::lit(rng.random::<f64>());
        let h0 = hm.value(&q, &p, t);
        for i in 0..n {
            let mut shifted = q.clone();
            shifted[i] += T::one();
            let dev = (hm.value(&shifted, &p, t) - h0).abs().to_f64_lossy();
            worst = if dev.is_nan() { f64::INFINITY } else { worst.max(dev) };
        }
    }
    worst
}

/// ||h^d(z) - (q + m, p)|| where h is the time-[0, 1] map integrated with
/// `steps` RK4 steps.
pub fn verify_md_point<T: Real>(hm: &dyn HamiltonianModel<T>, z: &PhasePoint<T>, cls: &OrbitClass, steps: usize) -> Result<T> {
    check_dim(hm, z)?;
    if cls.dim() != z.dim() {
        return Err(Error::DimensionMismatch { expected: z.dim(), found: cls.dim() });
    }
    let mut w = z.clone();
    for _ in 0..cls.d {
        w = flow(hm, &w, T::zero(), T::one(), steps)?;
    }
    Ok(w.distance(&PhasePoint { q: &z.q + cls.m_vector::<T>(), p: z.p.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfun::fd_derivative_check;
    use crate::twistmap::check_symplectic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(q: &[f64], p: &[f64]) -> PhasePoint<f64> {
        PhasePoint::from_slices(q, p).unwrap()
    }

    fn pend() -> SharedHamiltonian<f64> {
        Arc::new(pendulum(-1.0))
    }

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> PhasePoint<f64> {
        PhasePoint {
            q: DVector::from_fn(n, |_, _| rng.random::<f64>()),
            p: DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5)),
        }
    }

    #[test]
    fn flow_examples() {
        let free = free_particle::<f64>(1);
        let w = flow(&free, &pt(&[0.0], &[1.0]), 0.0, 1.0, 64).unwrap();
        assert!((w.q[0] - 1.0).abs() < 1e-14 && (w.p[0] - 1.0).abs() < 1e-14);

        let elliptic = pendulum(1.0);
        let w = flow(&elliptic, &pt(&[0.5], &[0.0]), 0.0, 1.0, 64).unwrap();
        assert!((w.q[0] - 0.5).abs() < 1e-15 && w.p[0].abs() < 1e-15);
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let hm = pend();
        let z = pt(&[0.1], &[0.9]);
        let at = |steps| flow(hm.as_ref(), &z, 0.0, 2.0, steps).unwrap();
        let (a, b, c) = (at(32), at(64), at(128));
        let ratio = a.distance(&b) / b.distance(&c);
        let order = ratio.log2();
        assert!((order - 4.0).abs() < 0.3, "order {order}");
    }

    #[test]
    fn non_finite_state_reported() {
        struct Blowup;
        impl HamiltonianModel<f64> for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn label(&self) -> String {
                "blowup".into()
            }
            fn value(&self, _: &DVector<f64>, p: &DVector<f64>, _: f64) -> f64 {
                p[0].powi(4)
            }
            fn gradient(&self, _: &DVector<f64>, p: &DVector<f64>, _: f64) -> DVector<f64> {
                DVector::from_vec(vec![0.0, f64::NAN * p[0]])
            }
            fn hessian(&self, _: &DVector<f64>, _: &DVector<f64>, _: f64) -> DMatrix<f64> {
                DMatrix::zeros(2, 2)
            }
        }
        assert!(matches!(flow(&Blowup, &pt(&[0.0], &[1.0]), 0.0, 1.0, 4), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tangent_examples() {
        let free = free_particle::<f64>(2);
        let eps = 0.3;
        let tf = tangent_flow(&free, &pt(&[0.1, 0.2], &[0.5, -0.5]), 0.0, eps, 16).unwrap();
        let mut expect = DMatrix::identity(4, 4);
        expect[(0, 2)] = eps;
        expect[(1, 3)] = eps;
        assert!((tf.final_matrix() - expect).amax() < 1e-14);
        assert_eq!(tf.matrices[0], DMatrix::identity(4, 4));

        let hm = pend();
        let tf = tangent_flow(hm.as_ref(), &pt(&[0.2], &[0.7]), 0.0, 1.0, 64).unwrap();
        assert!(tf.symplecticity_residual() < 1e-8);
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let hm = pend();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let z = random_point(&mut rng, 1);
            let u = flow_with_tangent(hm.as_ref(), &z, 0.0, 1.0, 64).unwrap().tangent;
            let x = z.to_vector();
            let mut fd = DMatrix::zeros(2, 2);
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fp = flow(hm.as_ref(), &PhasePoint::from_vector(&xp), 0.0, 1.0, 64).unwrap().to_vector();
                let fm = flow(hm.as_ref(), &PhasePoint::from_vector(&xm), 0.0, 1.0, 64).unwrap().to_vector();
                fd.set_column(j, &((fp - fm) / (2.0 * h)));
            }
            assert!((&u - &fd).amax() / fd.amax() < 1e-5);
        }
    }

    #[test]
    fn gronwall_examples() {
        struct Linear;
        impl HamiltonianModel<f64> for Linear {
            fn dim(&self) -> usize {
                1
            }
            fn label(&self) -> String {
                "linear".into()
            }
            fn value(&self, _: &DVector<f64>, p: &DVector<f64>, _: f64) -> f64 {
                0.3 * p[0]
            }
            fn gradient(&self, _: &DVector<f64>, _: &DVector<f64>, _: f64) -> DVector<f64> {
                DVector::from_vec(vec![0.0, 0.3])
            }
            fn hessian(&self, _: &DVector<f64>, _: &DVector<f64>, _: f64) -> DMatrix<f64> {
                DMatrix::zeros(2, 2)
            }
        }
        let rep = gronwall_check(&Linear, &pt(&[0.0], &[1.0]), 0.0, 1.0, 1.0, 32).unwrap();
        assert_eq!(rep.max_ratio, 0.0);

        let free = free_particle::<f64>(1);
        let rep = gronwall_check(&free, &pt(&[0.0], &[1.0]), 0.0, 1.0, 1.0, 32).unwrap();
        // ||U(t) - I|| = t, so the ratio is e^{-t}, largest near t = 0
        assert!(rep.max_ratio <= 1.0 && rep.max_ratio > 0.9);

        let hm = pend();
        let bounds = estimate_optical_bounds(hm.as_ref(), &OpticalSampling::default()).unwrap();
        let rep = gronwall_check(hm.as_ref(), &pt(&[0.3], &[0.8]), 0.0, 1.0, bounds.k, 64).unwrap();
        assert!(rep.max_ratio <= 1.0);
        assert!(matches!(gronwall_check(hm.as_ref(), &pt(&[0.3], &[0.8]), 0.0, 1.0, 0.5, 64), Err(Error::BoundViolation { .. })));
    }

    #[test]
    fn optical_bounds_for_catalog() {
        let b = estimate_optical_bounds(&free_particle::<f64>(2), &OpticalSampling::default()).unwrap();
        assert!((b.k - 1.05).abs() < 1e-12 && (b.c - 0.95).abs() < 1e-12);
        let b = estimate_optical_bounds(pend().as_ref(), &OpticalSampling::default()).unwrap();
        assert!((b.k - 1.05).abs() < 1e-12 && (b.c - 0.95).abs() < 1e-12);

        struct Inverted;
        impl HamiltonianModel<f64> for Inverted {
            fn dim(&self) -> usize {
                1
            }
            fn label(&self) -> String {
                "inverted".into()
            }
            fn value(&self, _: &DVector<f64>, p: &DVector<f64>, _: f64) -> f64 {
                -0.5 * p[0] * p[0]
            }
            fn gradient(&self, _: &DVector<f64>, p: &DVector<f64>, _: f64) -> DVector<f64> {
                DVector::from_vec(vec![0.0, -p[0]])
            }
            fn hessian(&self, _: &DVector<f64>, _: &DVector<f64>, _: f64) -> DMatrix<f64> {
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0])
            }
        }
        assert!(matches!(estimate_optical_bounds(&Inverted, &OpticalSampling::default()), Err(Error::NotOptical(_))));
    }

    #[test]
    fn twist_block_examples() {
        let unit = OpticalBounds::new(1.0, 1.0, 2.0).unwrap();
        let free = free_particle::<f64>(2);
        let rep = twist_block(&free, &pt(&[0.0, 0.0], &[0.3, 0.1]), 0.0, 0.25, &unit, 16).unwrap();
        assert!((rep.b[0][0] - 0.25).abs() < 1e-15 && rep.b[0][1].abs() < 1e-15);
        assert!(rep.within_window);

        let hm = pend();
        let bounds = estimate_optical_bounds(hm.as_ref(), &OpticalSampling::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let rep = twist_block(hm.as_ref(), &random_point(&mut rng, 1), 0.0, 0.1, &bounds, 16).unwrap();
            assert!(rep.within_window, "{rep:?}");
            assert!(rep.inverse_norm.is_finite());
        }
        // a long stint may fold the trajectory; the bound window is empty anyway
        let eps = 50.0;
        assert!(eps * bounds.c - bounds.k * eps * eps < 0.0);
        match twist_block(hm.as_ref(), &pt(&[0.3], &[0.2]), 0.0, eps, &bounds, 4000) {
            Ok(rep) => assert!(rep.bound_lo < 0.0),
            Err(e) => assert!(matches!(e, Error::PositivityFailure { .. })),
        }
    }

    #[test]
    fn choose_n_examples() {
        let b = |k, c| OpticalBounds::new(k, c, 2.0).unwrap();
        assert_eq!(choose_n(&b(2.0, 0.9), 4.0).unwrap(), 9);
        assert_eq!(choose_n(&b(1.0, 1.0), 4.0).unwrap(), 4);
        // safety 1 lands exactly on eps C - K eps^2 = 0 and is bumped
        assert_eq!(choose_n(&b(1.0, 1.0), 1.0).unwrap(), 2);
        assert!(choose_n(&b(1.0, 1.0), 0.5).is_err());
    }

    #[test]
    fn free_short_time_genfun_is_quadratic() {
        let eps = 0.2;
        let s = short_time_genfun(Arc::new(free_particle::<f64>(2)) as SharedHamiltonian<f64>, 0.0, eps, ShootingSettings::default()).unwrap();
        let q = DVector::from_vec(vec![0.1, -0.3]);
        let big_q = DVector::from_vec(vec![0.4, 0.2]);
        let d = &big_q - &q;
        assert!((s.value(&q, &big_q) - d.norm_squared() / (2.0 * eps)).abs() < 1e-13);
        assert!((s.d1(&q, &big_q) + &d / eps).amax() < 1e-12);
        assert!((s.d2(&q, &big_q) - &d / eps).amax() < 1e-12);
        assert!((s.d12(&q, &big_q) + DMatrix::identity(2, 2) / eps).amax() < 1e-10);
    }

    #[test]
    fn pendulum_short_time_genfun() {
        let hm = pend();
        let eps = 0.1;
        let s = short_time_genfun(hm.clone(), 0.0, eps, ShootingSettings::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z = random_point(&mut rng, 1);
            let w = flow(hm.as_ref(), &z, 0.0, eps, 64).unwrap();
            // the generating relations recover the flow
            let p0 = -s.d1(&z.q, &w.q);
            let p1 = s.d2(&z.q, &w.q);
            assert!((p0[0] - z.p[0]).abs() < 1e-8 && (p1[0] - w.p[0]).abs() < 1e-8);
        }
        let rep = fd_derivative_check(&s, 50, 1e-5, 4);
        assert!(rep.passes(1e-4), "{rep:?}");
        assert!(s.value(&DVector::from_element(1, 0.3), &DVector::from_element(1, 0.35)).is_finite());
    }

    #[test]
    fn decompose_free_particle() {
        let hm: SharedHamiltonian<f64> = Arc::new(free_particle(1));
        let bounds = OpticalBounds::new(1.0, 1.0, 2.0).unwrap();
        let plan = decompose(hm, &bounds, &DecomposeSettings::default()).unwrap();
        assert_eq!(plan.n_steps, 4);
        for m in &plan.maps {
            assert!((m.constants().a - 4.0).abs() < 1e-8);
            let q = DVector::from_element(1, 0.2);
            assert!((m.genfun().d12(&q, &q.add_scalar(0.1))[(0, 0)] + 4.0).abs() < 1e-9);
        }
        let chain = plan.chain().unwrap();
        let w = chain.forward(&pt(&[0.1], &[0.7])).unwrap();
        assert!((w.q[0] - 0.8).abs() < 1e-14 && (w.p[0] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn decompose_pendulum() {
        let hm = pend();
        let bounds = estimate_optical_bounds(hm.as_ref(), &OpticalSampling::default()).unwrap();
        let plan = decompose(hm.clone(), &bounds, &DecomposeSettings::default()).unwrap();
        let eps = 1.0 / plan.n_steps as f64;
        for m in &plan.maps {
            let a = m.constants().a;
            assert!((a * eps - 1.0).abs() < 0.2, "a = {a}, eps = {eps}");
        }
        let chain = plan.chain().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let z = random_point(&mut rng, 1);
            let direct = flow(hm.as_ref(), &z, 0.0, 1.0, 64 * plan.n_steps).unwrap();
            assert!(chain.forward(&z).unwrap().distance(&direct) < 1e-8);
            let back = chain.inverse(&chain.forward(&z).unwrap()).unwrap();
            assert!(back.distance(&z) < 1e-10);
            assert!(check_symplectic(&chain.tangent(&z).unwrap()).unwrap() < 1e-8);
        }
    }

    #[test]
    fn md_point_examples() {
        let free = free_particle::<f64>(1);
        let r = verify_md_point(&free, &pt(&[0.0], &[1.0]), &OrbitClass::new(vec![1], 1).unwrap(), 64).unwrap();
        assert!(r < 1e-14);
        let hm = pendulum(-1.0);
        let r = verify_md_point(&hm, &pt(&[0.0], &[0.0]), &OrbitClass::new(vec![0], 1).unwrap(), 64).unwrap();
        assert_eq!(r, 0.0);
        let r = verify_md_point(&pendulum(1.0), &pt(&[0.5], &[0.0]), &OrbitClass::new(vec![0], 1).unwrap(), 64).unwrap();
        assert!(r < 1e-15);
    }
}
