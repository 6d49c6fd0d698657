//! Generating functions S(q, Q) of twist maps, the quadratic/standard
//! catalog, and sampling-based certification of the twist constants.
//!
//! Derivative conventions: `d1 = dS/dq`, `d2 = dS/dQ`, and
//! `d12[(i, j)] = d^2 S / dq_i dQ_j`. The map generated by S is
//! `p = -d1 S(q, Q)`, `P = d2 S(q, Q)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// A generating function S(q, Q) on R^n x R^n with analytic derivatives.
///
/// Implementations must satisfy S(q + m, Q + m) = S(q, Q) for integer m.
pub trait GeneratingFunction<T: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn label(&self) -> String;
    fn value(&self, q: &DVector<T>, big_q: &DVector<T>) -> T;
    fn d1(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T>;
    fn d2(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T>;
    fn d11(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T>;
    fn d12(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T>;
    fn d22(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T>;

    /// Whether the family promises S(0, 0) = 0.
    fn claims_normalization(&self) -> bool {
        false
    }
}

pub type SharedGenFun<T> = Arc<dyn GeneratingFunction<T>>;

/// A 1-periodic potential V on R^n with gradient and Hessian.
pub trait Potential<T: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, q: &DVector<T>) -> T;
    fn gradient(&self, q: &DVector<T>) -> DVector<T>;
    fn hessian(&self, q: &DVector<T>) -> DMatrix<T>;
}

/// V(q) = sum_j c_j / (4 pi^2) cos(2 pi <k_j, q>).
///
/// With a single term k = (1) this is the classical standard-map potential;
/// the Froeschle potential uses k in {(1,0), (0,1), (1,1)}.
#[derive(Debug, Clone)]
pub struct CosineSeries<T: Real> {
    n: usize,
    terms: Vec<(T, DVector<T>)>,
}

impl<T: Real> CosineSeries<T> {
    pub fn new(n: usize, terms: Vec<(T, Vec<i64>)>) -> Result<Self> {
        let mut out = Vec::with_capacity(terms.len());
        for (c, k) in terms {
            if k.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: k.len() });
            }
            out.push((c, DVector::from_iterator(n, k.iter().map(|&x| T::lit(x as f64)))));
        }
        Ok(Self { n, terms: out })
    }

    pub fn zero(n: usize) -> Self {
        Self { n, terms: Vec::new() }
    }

    /// s / (4 pi^2) cos(2 pi q), n = 1.
    pub fn standard(s: T) -> Self {
        Self::new(1, vec![(s, vec![1])]).expect("dimension 1")
    }

    /// (K1 cos 2 pi q1 + K2 cos 2 pi q2 + lambda cos 2 pi (q1 + q2)) / (2 pi)^2.
    pub fn froeschle(k1: T, k2: T, lambda: T) -> Self {
        Self::new(2, vec![(k1, vec![1, 0]), (k2, vec![0, 1]), (lambda, vec![1, 1])])
            .expect("dimension 2")
    }
}

impl<T: Real> Potential<T> for CosineSeries<T> {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, q: &DVector<T>) -> T {
        let two_pi = T::two_pi();
        let scale = T::one() / (two_pi * two_pi);
        self.terms.iter().fold(T::zero(), |acc, (c, k)| acc + *c * scale * (two_pi * k.dot(q)).cos())
    }

    fn gradient(&self, q: &DVector<T>) -> DVector<T> {
        let two_pi = T::two_pi();
        let mut g = DVector::zeros(self.n);
        for (c, k) in &self.terms {
            let w = -*c / two_pi * (two_pi * k.dot(q)).sin();
            g.axpy(w, k, T::one());
        }
        g
    }

    fn hessian(&self, q: &DVector<T>) -> DMatrix<T> {
        let two_pi = T::two_pi();
        let mut h = DMatrix::zeros(self.n, self.n);
        for (c, k) in &self.terms {
            let w = -*c * (two_pi * k.dot(q)).cos();
            h += k * k.transpose() * w;
        }
        h
    }
}

/// S0(q, Q) = 1/2 <A^{-1}(Q - q), Q - q>, generating (q, p) -> (q + A p, p).
#[derive(Debug, Clone)]
pub struct QuadraticGenFun<T: Real> {
    a: DMatrix<T>,
    a_inv: DMatrix<T>,
}

impl<T: Real> QuadraticGenFun<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn inverse_matrix(&self) -> &DMatrix<T> {
        &self.a_inv
    }
}

/// Builds the completely integrable generating function for a symmetric,
/// nonsingular A.
pub fn integrable_genfun<T: Real>(a: DMatrix<T>) -> Result<QuadraticGenFun<T>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), found: a.ncols() });
    }
    let asym = linalg::asymmetry(&a);
    let scale = a.amax().max(T::one());
    if asym > T::lit(1e-12) * scale {
        return Err(Error::NotSymmetric(asym.to_f64_lossy()));
    }
    let a_inv = linalg::inverse(&a, "integrable twist matrix A")?;
    if a_inv.iter().any(|x| !x.finite()) {
        return Err(Error::SingularMatrix("integrable twist matrix A"));
    }
    let a_inv = linalg::sym_part(&a_inv);
    Ok(QuadraticGenFun { a, a_inv })
}

impl<T: Real> GeneratingFunction<T> for QuadraticGenFun<T> {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn label(&self) -> String {
        "integrable".into()
    }

    fn value(&self, q: &DVector<T>, big_q: &DVector<T>) -> T {
        let dx = big_q - q;
        (&self.a_inv * &dx).dot(&dx) * T::lit(0.5)
    }

    fn d1(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T> {
        -(&self.a_inv * (big_q - q))
    }

    fn d2(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T> {
        &self.a_inv * (big_q - q)
    }

    fn d11(&self, _q: &DVector<T>, _big_q: &DVector<T>) -> DMatrix<T> {
        self.a_inv.clone()
    }

    fn d12(&self, _q: &DVector<T>, _big_q: &DVector<T>) -> DMatrix<T> {
        -&self.a_inv
    }

    fn d22(&self, _q: &DVector<T>, _big_q: &DVector<T>) -> DMatrix<T> {
        self.a_inv.clone()
    }

    fn claims_normalization(&self) -> bool {
        true
    }
}

/// S(q, Q) = S0(q, Q) + V(q).
#[derive(Clone)]
pub struct StandardGenFun<T: Real> {
    base: QuadraticGenFun<T>,
    potential: Arc<dyn Potential<T>>,
    label: String,
}

impl<T: Real> StandardGenFun<T> {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn potential(&self) -> &Arc<dyn Potential<T>> {
        &self.potential
    }

    pub fn base(&self) -> &QuadraticGenFun<T> {
        &self.base
    }
}

/// Builds S0 + V after checking V is 1-periodic on a deterministic sample.
pub fn standard_genfun<T: Real>(
    a: DMatrix<T>,
    potential: Arc<dyn Potential<T>>,
) -> Result<StandardGenFun<T>> {
    let base = integrable_genfun(a)?;
    let n = base.dim();
    if potential.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: potential.dim() });
    }
    check_potential_periodic(potential.as_ref(), 64, 0x5eed)?;
    Ok(StandardGenFun { base, potential, label: "standard".into() })
}

fn check_potential_periodic<T: Real>(v: &dyn Potential<T>, samples: usize, seed: u64) -> Result<()> {
    let n = v.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let q = random_unit_point::<T>(&mut rng, n);
        let v0 = v.value(&q);
        for i in 0..n {
            let mut shifted = q.clone();
            shifted[i] += T::one();
            let dev = (v.value(&shifted) - v0).abs();
            let tol = T::lit(1e-9).max(T::default_epsilon() * T::lit(1e3));
            if dev > tol * (T::one() + v0.abs()) {
                return Err(Error::NonPeriodic {
                    what: "potential",
                    deviation: dev.to_f64_lossy(),
                    at: to_f64_vec(&q),
                });
            }
        }
    }
    Ok(())
}

/// The classical standard family on T^1 x R: A = 1, V = s/(4 pi^2) cos(2 pi q).
pub fn standard_map<T: Real>(s: T) -> StandardGenFun<T> {
    standard_genfun(DMatrix::identity(1, 1), Arc::new(CosineSeries::standard(s)))
        .expect("catalog family is valid")
}

/// The Froeschle family on T^2 x R^2 with A = I.
pub fn froeschle<T: Real>(k1: T, k2: T, lambda: T) -> StandardGenFun<T> {
    standard_genfun(DMatrix::identity(2, 2), Arc::new(CosineSeries::froeschle(k1, k2, lambda)))
        .expect("catalog family is valid")
        .with_label("froeschle")
}

impl<T: Real> GeneratingFunction<T> for StandardGenFun<T> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, q: &DVector<T>, big_q: &DVector<T>) -> T {
        self.base.value(q, big_q) + self.potential.value(q)
    }

    fn d1(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T> {
        self.base.d1(q, big_q) + self.potential.gradient(q)
    }

    fn d2(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T> {
        self.base.d2(q, big_q)
    }

    fn d11(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        self.base.d11(q, big_q) + self.potential.hessian(q)
    }

    fn d12(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        self.base.d12(q, big_q)
    }

    fn d22(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        self.base.d22(q, big_q)
    }
}

/// Where and how densely the twist constants are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    /// Grid points per axis, over q in [0,1)^n and Q - q in the displacement box.
    pub per_axis: usize,
    /// Extra uniformly random (q, Q) pairs.
    pub random: usize,
    /// Half-width w of the displacement box [-w, w]^n.
    pub box_half_width: f64,
    /// Cap on the tensor grid size; `per_axis` is reduced to fit.
    pub max_grid: usize,
    pub seed: u64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { per_axis: 32, random: 10_000, box_half_width: 3.0, max_grid: 1 << 18, seed: 0x7157 }
    }
}

impl SamplingSpec {
    /// Per-axis grid density actually used in dimension `2n`.
    pub fn effective_per_axis(&self, n: usize) -> usize {
        let mut k = self.per_axis.max(1);
        while k > 1 && (k as f64).powi(2 * n as i32) > self.max_grid as f64 {
            k -= 1;
        }
        k
    }

    /// Deterministic grid plus seeded random (q, Q) pairs.
    pub fn pairs<T: Real>(&self, n: usize) -> Vec<(DVector<T>, DVector<T>)> {
        let k = self.effective_per_axis(n);
        let w = self.box_half_width;
        let axis_q: Vec<f64> = (0..k).map(|i| i as f64 / k as f64).collect();
        let axis_d: Vec<f64> = if k == 1 {
            vec![0.0]
        } else {
            (0..k).map(|j| -w + 2.0 * w * j as f64 / (k - 1) as f64).collect()
        };
        let mut out = Vec::new();
        for idx in 0..k.pow(2 * n as u32) {
            let mut rem = idx;
            let mut q = DVector::zeros(n);
            let mut d = DVector::zeros(n);
            for i in 0..n {
                q[i] = T::lit(axis_q[rem % k]);
                rem /= k;
            }
            for i in 0..n {
                d[i] = T::lit(axis_d[rem % k]);
                rem /= k;
            }
            let big_q = &q + d;
            out.push((q, big_q));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for _ in 0..self.random {
            let q = random_unit_point::<T>(&mut rng, n);
            let d = DVector::from_fn(n, |_, _| T::lit(rng.random_range(-w..=w)));
            let big_q = &q + d;
            out.push((q, big_q));
        }
        out
    }

    /// Grid over the fundamental domain [0,1)^n only.
    pub fn torus_grid<T: Real>(&self, n: usize) -> Vec<DVector<T>> {
        let mut k = self.per_axis.max(1);
        while k > 1 && (k as f64).powi(n as i32) > self.max_grid as f64 {
            k -= 1;
        }
        (0..k.pow(n as u32))
            .map(|idx| {
                let mut rem = idx;
                DVector::from_fn(n, |_, _| {
                    let v = (rem % k) as f64 / k as f64;
                    rem /= k;
                    T::lit(v)
                })
            })
            .collect()
    }
}

/// The region on which twist constants were measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedBox {
    /// q ranges over [0,1)^n; Q - q over [-w, w]^n.
    pub displacement_half_width: f64,
    pub grid_per_axis: usize,
    pub random_samples: usize,
}

/// Convexity margin `a` and inverse-twist bound `kprime`, both measured on
/// samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwistConstants {
    /// min over samples of the smallest eigenvalue of -sym(d12 S).
    pub a: f64,
    /// max over samples of ||(d12 S)^{-1}||.
    pub kprime: f64,
    pub sample_count: usize,
    pub certified_box: CertifiedBox,
}

impl TwistConstants {
    /// Constants known by construction rather than by sampling.
    pub fn exact(a: f64, kprime: f64) -> Self {
        Self {
            a,
            kprime,
            sample_count: 0,
            certified_box: CertifiedBox {
                displacement_half_width: f64::INFINITY,
                grid_per_axis: 0,
                random_samples: 0,
            },
        }
    }
}

struct SampleTwist {
    margin: f64,
    kprime: f64,
    v: Vec<f64>,
    at: usize,
}

/// Measures the convexity margin of S on the sampling spec.
///
/// Fails with the witnessing (q, Q, v) at the first sample (in sample order)
/// where `<-d12 S v, v> <= 0`.
pub fn certify_convexity<T: Real>(s: &dyn GeneratingFunction<T>, spec: &SamplingSpec) -> Result<TwistConstants> {
    let n = s.dim();
    let pairs = spec.pairs::<T>(n);
    let per_sample: Vec<SampleTwist> = pairs
        .par_iter()
        .enumerate()
        .map(|(at, (q, big_q))| {
            let m = s.d12(q, big_q);
            let neg_sym = -linalg::sym_part(&m);
            let (margin, v) = linalg::sym_min_eigenpair(&neg_sym);
            let kprime = linalg::inverse_op_norm(&m);
            SampleTwist { margin: margin.to_f64_lossy(), kprime: kprime.to_f64_lossy(), v: to_f64_vec(&v), at }
        })
        .collect();

    let mut a = f64::INFINITY;
    let mut kprime = 0.0f64;
    for st in &per_sample {
        if !(st.margin > 0.0) {
            let (q, big_q) = &pairs[st.at];
            return Err(Error::ConvexityViolation {
                q: to_f64_vec(q),
                big_q: to_f64_vec(big_q),
                v: st.v.clone(),
                margin: st.margin,
            });
        }
        a = a.min(st.margin);
        kprime = kprime.max(st.kprime);
    }
    Ok(TwistConstants {
        a,
        kprime,
        sample_count: pairs.len(),
        certified_box: CertifiedBox {
            displacement_half_width: spec.box_half_width,
            grid_per_axis: spec.effective_per_axis(n),
            random_samples: spec.random,
        },
    })
}

/// Coefficients of the quadratic lower bound
/// S(q, Q) >= alpha - beta |q - Q| + gamma |q - Q|^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCert {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Largest displacement |Q - q| exercised by the verification pass.
    pub verified_radius: f64,
    pub verified_samples: usize,
}

impl LowerBoundCert {
    pub fn bound(&self, r: f64) -> f64 {
        self.alpha - self.beta * r + self.gamma * r * r
    }
}

/// Builds the lower-bound certificate from the diagonal values of S and the
/// convexity margin, then verifies it on `spec.random` random pairs.
pub fn lower_bound_cert<T: Real>(
    s: &dyn GeneratingFunction<T>,
    tc: &TwistConstants,
    spec: &SamplingSpec,
) -> Result<LowerBoundCert> {
    if !(tc.a > 0.0) {
        return Err(Error::InvalidArgument("twist constants are not certified (a <= 0)".into()));
    }
    let n = s.dim();
    let grid = spec.torus_grid::<T>(n);

    let diag_value = |q: &DVector<T>| s.value(q, q);
    let diag_grad = |q: &DVector<T>| s.d1(q, q) + s.d2(q, q);
    let best = grid
        .iter()
        .min_by(|x, y| diag_value(x).partial_cmp(&diag_value(y)).unwrap_or(std::cmp::Ordering::Equal))
        .cloned()
        .unwrap_or_else(|| DVector::zeros(n));
    let (_, alpha) = polish_descent(best, diag_value, diag_grad);

    let d2_sq = |q: &DVector<T>| s.d2(q, q).norm_squared();
    let d2_sq_grad = |q: &DVector<T>| {
        let jac = s.d12(q, q).transpose() + s.d22(q, q);
        -(jac.transpose() * s.d2(q, q)) * T::lit(2.0)
    };
    let worst = grid
        .iter()
        .max_by(|x, y| d2_sq(x).partial_cmp(&d2_sq(y)).unwrap_or(std::cmp::Ordering::Equal))
        .cloned()
        .unwrap_or_else(|| DVector::zeros(n));
    let (_, neg_beta_sq) = polish_descent(worst, |q| -d2_sq(q), d2_sq_grad);
    let beta = (-neg_beta_sq.to_f64_lossy()).max(0.0).sqrt();

    let alpha = alpha.to_f64_lossy();
    let gamma = tc.a / 2.0;
    let dominance = 2.0 * (beta + (beta * beta + gamma * alpha.abs()).sqrt()) / gamma;
    let radius = spec.box_half_width.max(dominance);

    let mut cert = LowerBoundCert { alpha, beta, gamma, verified_radius: radius, verified_samples: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x4c45_4d4d_4134_35);
    let samples: Vec<(DVector<T>, DVector<T>)> = (0..spec.random.max(1))
        .map(|_| {
            let q = random_unit_point::<T>(&mut rng, n);
            let d = DVector::from_fn(n, |_, _| T::lit(rng.random_range(-radius..=radius)));
            let big_q = &q + d;
            (q, big_q)
        })
        .collect();
    let violation = samples
        .par_iter()
        .map(|(q, big_q)| {
            let r = (big_q - q).norm().to_f64_lossy();
            let sv = s.value(q, big_q).to_f64_lossy();
            let slack = sv - cert.bound(r);
            let tol = 1e-9 * (1.0 + sv.abs());
            (slack + tol, q, big_q)
        })
        .filter(|(margin, _, _)| *margin < 0.0)
        .min_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal));
    if let Some((slack, q, big_q)) = violation {
        let mut at = to_f64_vec(q);
        at.extend(to_f64_vec(big_q));
        return Err(Error::BoundViolation { what: "quadratic lower bound on S".into(), slack, at });
    }
    cert.verified_samples = samples.len();
    Ok(cert)
}

/// Backtracking gradient descent on a function of q; returns the best point
/// and value seen.
fn polish_descent<T: Real>(
    start: DVector<T>,
    f: impl Fn(&DVector<T>) -> T,
    grad: impl Fn(&DVector<T>) -> DVector<T>,
) -> (DVector<T>, T) {
    let mut x = start;
    let mut fx = f(&x);
    let mut step = T::lit(0.1);
    for _ in 0..200 {
        let g = grad(&x);
        let gn = g.norm();
        if gn < T::lit(1e-14) {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &x - &g * step;
            let ft = f(&trial);
            if ft < fx {
                x = trial;
                fx = ft;
                step *= T::lit(2.0);
                accepted = true;
                break;
            }
            step *= T::lit(0.5);
        }
        if !accepted {
            break;
        }
    }
    (x, fx)
}

/// Maximum relative error of each analytic derivative against central
/// finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub samples: usize,
    pub h: f64,
    pub d1: f64,
    pub d2: f64,
    pub d11: f64,
    pub d12: f64,
    pub d22: f64,
    /// d12 against the transpose of the q-derivative of d2.
    pub mixed: f64,
}

impl FdReport {
    pub fn max_error(&self) -> f64 {
        [self.d1, self.d2, self.d11, self.d12, self.d22, self.mixed].into_iter().fold(0.0, f64::max)
    }

    /// Names of the derivatives whose error exceeds `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&'static str> {
        [("d1", self.d1), ("d2", self.d2), ("d11", self.d11), ("d12", self.d12), ("d22", self.d22), ("mixed", self.mixed)]
            .into_iter()
            .filter(|(_, e)| !(*e < tol))
            .map(|(name, _)| name)
            .collect()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.failures(tol).is_empty()
    }
}

fn rel_err<T: Real>(analytic: &DMatrix<T>, fd: &DMatrix<T>) -> f64 {
    let diff = (analytic - fd).amax().to_f64_lossy();
    let scale = fd.amax().to_f64_lossy().max(1.0);
    let e = diff / scale;
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// Central-difference audit of all analytic derivatives of S at `samples`
/// seeded random points with q in [0,1)^n and Q - q in [-1,1]^n.
pub fn fd_derivative_check<T: Real>(s: &dyn GeneratingFunction<T>, samples: usize, h: f64, seed: u64) -> FdReport {
    let n = s.dim();
    let hh = T::lit(h);
    let two_h = hh * T::lit(2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = FdReport { samples, h, d1: 0.0, d2: 0.0, d11: 0.0, d12: 0.0, d22: 0.0, mixed: 0.0 };
    for _ in 0..samples {
        let q = random_unit_point::<T>(&mut rng, n);
        let big_q = &q + DVector::from_fn(n, |_, _| T::lit(rng.random_range(-1.0..=1.0)));

        let mut fd1 = DMatrix::zeros(n, 1);
        let mut fd2 = DMatrix::zeros(n, 1);
        let mut fd11 = DMatrix::zeros(n, n);
        let mut fd12 = DMatrix::zeros(n, n);
        let mut fd22 = DMatrix::zeros(n, n);
        let mut fd21 = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[j] += hh;
            qm[j] -= hh;
            let mut bp = big_q.clone();
            let mut bm = big_q.clone();
            bp[j] += hh;
            bm[j] -= hh;
            fd1[(j, 0)] = (s.value(&qp, &big_q) - s.value(&qm, &big_q)) / two_h;
            fd2[(j, 0)] = (s.value(&q, &bp) - s.value(&q, &bm)) / two_h;
            let c11 = (s.d1(&qp, &big_q) - s.d1(&qm, &big_q)) / two_h;
            let c12 = (s.d1(&q, &bp) - s.d1(&q, &bm)) / two_h;
            let c22 = (s.d2(&q, &bp) - s.d2(&q, &bm)) / two_h;
            let c21 = (s.d2(&qp, &big_q) - s.d2(&qm, &big_q)) / two_h;
            fd11.set_column(j, &c11);
            fd12.set_column(j, &c12);
            fd22.set_column(j, &c22);
            fd21.set_column(j, &c21);
        }
        let a1 = DMatrix::from_column_slice(n, 1, s.d1(&q, &big_q).as_slice());
        let a2 = DMatrix::from_column_slice(n, 1, s.d2(&q, &big_q).as_slice());
        let a12 = s.d12(&q, &big_q);
        rep.d1 = rep.d1.max(rel_err(&a1, &fd1));
        rep.d2 = rep.d2.max(rel_err(&a2, &fd2));
        rep.d11 = rep.d11.max(rel_err(&s.d11(&q, &big_q), &fd11));
        rep.d12 = rep.d12.max(rel_err(&a12, &fd12));
        rep.d22 = rep.d22.max(rel_err(&s.d22(&q, &big_q), &fd22));
        rep.mixed = rep.mixed.max(rel_err(&a12, &fd21.transpose()));
    }
    rep
}

/// Largest |S(q + m, Q + m) - S(q, Q)| over seeded random samples with
/// integer shifts m in [-3, 3]^n.
pub fn periodicity_defect<T: Real>(s: &dyn GeneratingFunction<T>, samples: usize, seed: u64) -> f64 {
    let n = s.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let q = random_unit_point::<T>(&mut rng, n);
        let big_q = &q + DVector::from_fn(n, |_, _| T::lit(rng.random_range(-2.0..=2.0)));
        let m = DVector::from_fn(n, |_, _| T::lit(rng.random_range(-3i64..=3) as f64));
        let dev = (s.value(&(&q + &m), &(&big_q + &m)) - s.value(&q, &big_q)).abs();
        worst = worst.max(dev.to_f64_lossy());
    }
    worst
}

pub(crate) fn random_unit_point<T: Real>(rng: &mut impl Rng, n: usize) -> DVector<T> {
    DVector::from_fn(n, |_, _| T::lit(rng.random::<f64>()))
}

pub(crate) fn to_f64_vec<T: Real>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}
