//! Suspension of a convex twist map into a Hamiltonian isotopy.
//!
//! The family S_t interpolates from a pure shear (t <= 1/2) to the target
//! generating function (t = 1) through a cutoff f; the isotopy F_t it
//! generates is exact symplectic, and its velocity field X_t is Hamiltonian.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genfun::{GeneratingFunction, SharedGenFun, TwistConstants};
use crate::scalar::Real;
use crate::torus::PhasePoint;
use crate::twistmap::{SolverSettings, TwistMap};

/// f(t) = 1 / sin^2(pi t) on (0, 1/2], sin^2(pi t) on [1/2, 1], and phi = 1/f
/// extended by phi(0) = 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CutoffFunction;

pub fn make_cutoff() -> CutoffFunction {
    CutoffFunction
}

impl CutoffFunction {
    /// sin(pi t), evaluated through the nearer endpoint so that it vanishes
    /// exactly at t = 0 and t = 1.
    fn sin_pi<T: Real>(t: T) -> T {
        let pi = T::pi();
        if t <= T::lit(0.5) {
            (pi * t).sin()
        } else {
            (pi * (T::one() - t)).sin()
        }
    }

    pub fn f<T: Real>(&self, t: T) -> T {
        let s2 = Self::sin_pi(t).powi(2);
        if t <= T::lit(0.5) {
            T::one() / s2
        } else {
            s2
        }
    }

    pub fn f_prime<T: Real>(&self, t: T) -> T {
        let pi = T::pi();
        let s = Self::sin_pi(t);
        let c = (pi * t).cos();
        if t <= T::lit(0.5) {
            -T::lit(2.0) * pi * c / (s * s * s)
        } else {
            T::lit(2.0) * pi * s * c
        }
    }

    pub fn phi<T: Real>(&self, t: T) -> T {
        let s2 = Self::sin_pi(t).powi(2);
        if t <= T::lit(0.5) {
            s2
        } else {
            T::one() / s2
        }
    }

    /// phi'(t) = pi sin(2 pi t) on [0, 1/2].
    pub fn phi_prime<T: Real>(&self, t: T) -> T {
        let pi = T::pi();
        if t <= T::lit(0.5) {
            pi * (T::two_pi() * t).sin()
        } else {
            -self.f_prime(t) / self.f(t).powi(2)
        }
    }
}

/// Finite-difference stencil for the t-derivatives of the isotopy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StencilConfig {
    pub dt: f64,
    pub richardson_levels: usize,
}

impl Default for StencilConfig {
    fn default() -> Self {
        Self { dt: 1e-4, richardson_levels: 1 }
    }
}

/// S_t, F_t, X_t and H_t for a convex target map.
#[derive(Clone)]
pub struct SuspensionFamily<T: Real> {
    target: SharedGenFun<T>,
    a: T,
    cutoff: CutoffFunction,
    pub stencil: StencilConfig,
    pub solver: SolverSettings,
}

impl<T: Real> SuspensionFamily<T> {
    /// Uses the target's certified convexity margin `a`.
    pub fn new(target: &TwistMap<T>) -> Result<Self> {
        let a = target.constants().a;
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidArgument(format!("suspension needs a certified margin a > 0, got {a}")));
        }
        Ok(Self {
            target: target.genfun().clone(),
            a: T::lit(a),
            cutoff: make_cutoff(),
            stencil: StencilConfig::default(),
            solver: SolverSettings { tol: 1e-14, max_iter: 60 },
        })
    }

    pub fn with_stencil(mut self, stencil: StencilConfig) -> Self {
        self.stencil = stencil;
        self
    }

    pub fn a(&self) -> T {
        self.a
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn cutoff(&self) -> &CutoffFunction {
        &self.cutoff
    }
}

/// S_t as a generating function with analytic derivatives.
pub struct FamilyGenFun<T: Real> {
    target: SharedGenFun<T>,
    /// Coefficient a f(t) of the shear term.
    shear: T,
    /// Weight 1 - f(t) of the target, zero for t <= 1/2.
    weight: T,
    t: T,
}

impl<T: Real> FamilyGenFun<T> {
    fn blend_vec(&self, shear: DVector<T>, target: impl FnOnce() -> DVector<T>) -> DVector<T> {
        if self.weight == T::zero() {
            shear
        } else {
            shear + target() * self.weight
        }
    }

    fn blend_mat(&self, shear: DMatrix<T>, target: impl FnOnce() -> DMatrix<T>) -> DMatrix<T> {
        if self.weight == T::zero() {
            shear
        } else {
            shear + target() * self.weight
        }
    }
}

impl<T: Real> GeneratingFunction<T> for FamilyGenFun<T> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn label(&self) -> String {
        format!("suspension[{}; t={}]", self.target.label(), self.t.to_f64_lossy())
    }

    fn value(&self, q: &DVector<T>, big_q: &DVector<T>) -> T {
        let shear = (big_q - q).norm_squared() * self.shear * T::lit(0.5);
        if self.weight == T::zero() {
            shear
        } else {
            shear + self.target.value(q, big_q) * self.weight
        }
    }

    fn d1(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T> {
        self.blend_vec((q - big_q) * self.shear, || self.target.d1(q, big_q))
    }

    fn d2(&self, q: &DVector<T>, big_q: &DVector<T>) -> DVector<T> {
        self.blend_vec((big_q - q) * self.shear, || self.target.d2(q, big_q))
    }

    fn d11(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        let n = q.len();
        self.blend_mat(DMatrix::identity(n, n) * self.shear, || self.target.d11(q, big_q))
    }

    fn d12(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        let n = q.len();
        self.blend_mat(-DMatrix::identity(n, n) * self.shear, || self.target.d12(q, big_q))
    }

    fn d22(&self, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
        let n = q.len();
        self.blend_mat(DMatrix::identity(n, n) * self.shear, || self.target.d22(q, big_q))
    }
}

fn check_t<T: Real>(t: T, lo: f64, lo_open: bool) -> Result<()> {
    let v = t.to_f64_lossy();
    let ok = if lo_open { v > lo } else { v >= lo };
    if !(ok && v <= 1.0) {
        return Err(Error::OutOfRange { what: "suspension time", value: v, lo, hi: 1.0 });
    }
    Ok(())
}

/// S_t for t in (0, 1].
pub fn family_genfun<T: Real>(fam: &SuspensionFamily<T>, t: T) -> Result<FamilyGenFun<T>> {
    check_t(t, 0.0, true)?;
    let f = fam.cutoff.f(t);
    let weight = if t <= T::lit(0.5) { T::zero() } else { T::one() - f };
    Ok(FamilyGenFun { target: fam.target.clone(), shear: fam.a * f, weight, t })
}

/// t-derivative of S_t(q, Q) at fixed (q, Q).
pub fn family_time_derivative<T: Real>(fam: &SuspensionFamily<T>, t: T, q: &DVector<T>, big_q: &DVector<T>) -> Result<T> {
    check_t(t, 0.0, true)?;
    let fp = fam.cutoff.f_prime(t);
    let shear = (big_q - q).norm_squared() * fam.a * fp * T::lit(0.5);
    if t <= T::lit(0.5) {
        Ok(shear)
    } else {
        Ok(shear - fam.target.value(q, big_q) * fp)
    }
}

fn family_map<T: Real>(fam: &SuspensionFamily<T>, t: T) -> Result<TwistMap<T>> {
    let s = Arc::new(family_genfun(fam, t)?);
    let a = fam.a.to_f64_lossy();
    Ok(TwistMap::new(s, TwistConstants::exact(a, 1.0 / a))?.with_settings(fam.solver))
}

/// F_t(z); F_0 = Id, F_t = (q + p / (a f(t)), p) for t <= 1/2.
pub fn isotopy_map<T: Real>(fam: &SuspensionFamily<T>, t: T, z: &PhasePoint<T>) -> Result<PhasePoint<T>> {
    check_t(t, 0.0, false)?;
    if t <= T::lit(0.5) {
        let k = fam.cutoff.phi(t) / fam.a;
        return Ok(PhasePoint { q: &z.q + &z.p * k, p: z.p.clone() });
    }
    family_map(fam, t)?.forward(z)
}

/// F_t^{-1}(z).
pub fn isotopy_inverse<T: Real>(fam: &SuspensionFamily<T>, t: T, z: &PhasePoint<T>) -> Result<PhasePoint<T>> {
    check_t(t, 0.0, false)?;
    if t <= T::lit(0.5) {
        let k = fam.cutoff.phi(t) / fam.a;
        return Ok(PhasePoint { q: &z.q - &z.p * k, p: z.p.clone() });
    }
    family_map(fam, t)?.inverse(z)
}

/// d/dt of `g(t)` by a second-order difference with Richardson extrapolation.
/// The family is smooth on [0, 1/2] and [1/2, 1] separately, so stencils stay
/// inside the piece containing t and turn one-sided near 0, 1/2 and 1.
fn time_derivative<T: Real>(stencil: &StencilConfig, t: T, g: impl Fn(T) -> Result<DVector<T>>) -> Result<DVector<T>> {
    let tf = t.to_f64_lossy();
    let (lo, hi) = if tf <= 0.5 { (0.0, 0.5) } else { (0.5, 1.0) };
    let diff = |h: f64| -> Result<DVector<T>> {
        let hh = T::lit(h);
        if tf - h >= lo && tf + h <= hi {
            Ok((g(t + hh)? - g(t - hh)?) / (hh * T::lit(2.0)))
        } else if tf - 2.0 * h >= lo {
            let d = g(t)? * T::lit(3.0) - g(t - hh)? * T::lit(4.0) + g(t - hh * T::lit(2.0))?;
            Ok(d / (hh * T::lit(2.0)))
        } else {
            let d = g(t + hh)? * T::lit(4.0) - g(t)? * T::lit(3.0) - g(t + hh * T::lit(2.0))?;
            Ok(d / (hh * T::lit(2.0)))
        }
    };
    if !(stencil.dt > 0.0 && 4.0 * stencil.dt <= 0.5) {
        return Err(Error::InvalidArgument(format!("stencil step {} must lie in (0, 1/8]", stencil.dt)));
    }
    // Richardson tableau for an error series in h^2
    let levels = stencil.richardson_levels;
    let mut row: Vec<DVector<T>> = (0..=levels).map(|k| diff(stencil.dt / 2f64.powi(k as i32))).collect::<Result<_>>()?;
    for j in 1..=levels {
        let w = T::lit(4f64.powi(j as i32));
        row = (1..row.len()).map(|k| (&row[k] * w - &row[k - 1]) / (w - T::one())).collect();
    }
    Ok(row.swap_remove(0))
}

/// X_t(z) = (dF_t/dt)(F_t^{-1}(z)), stacked as (X^q, X^p).
pub fn vector_field<T: Real>(fam: &SuspensionFamily<T>, t: T, z: &PhasePoint<T>) -> Result<DVector<T>> {
    check_t(t, 0.0, false)?;
    let w = isotopy_inverse(fam, t, z)?;
    time_derivative(&fam.stencil, t, |s| Ok(isotopy_map(fam, s, &w)?.to_vector()))
}

/// S~_t(w) = S_t(q_w, Q_t(w)), the primitive with F_t^* p dq - p dq = dS~_t.
pub fn primitive<T: Real>(fam: &SuspensionFamily<T>, t: T, w: &PhasePoint<T>) -> Result<T> {
    check_t(t, 0.0, false)?;
    if t <= T::lit(0.5) {
        return Ok(w.p.norm_squared() * fam.cutoff.phi(t) / (fam.a * T::lit(2.0)));
    }
    let big_q = isotopy_map(fam, t, w)?.q;
    Ok(family_genfun(fam, t)?.value(&w.q, &big_q))
}

/// H_t(z) = <p, X_t^q(z)> - (dS~_t/dt)(F_t^{-1} z), so that q' = H_p, p' = -H_q
/// reproduces X_t.
pub fn hamiltonian<T: Real>(fam: &SuspensionFamily<T>, t: T, z: &PhasePoint<T>) -> Result<T> {
    let x = vector_field(fam, t, z)?;
    let n = z.dim();
    let w = isotopy_inverse(fam, t, z)?;
    let ds = if t <= T::lit(0.5) {
        w.p.norm_squared() * fam.cutoff.phi_prime(t) / (fam.a * T::lit(2.0))
    } else {
        time_derivative(&fam.stencil, t, |s| Ok(DVector::from_element(1, primitive(fam, s, &w)?)))?[0]
    };
    Ok(z.p.dot(&x.rows(0, n)) - ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspensionReport {
    pub max_error: f64,
    /// Distance between the integrated time-1 point and the target image, per grid point.
    pub errors: Vec<f64>,
    pub steps: usize,
}

/// Integrates z' = X_t(z) over [0, 1] with RK4 from every grid point and
/// compares with the target map.
pub fn verify_suspension<T: Real>(
    fam: &SuspensionFamily<T>,
    target: &TwistMap<T>,
    grid: &[PhasePoint<T>],
    steps: usize,
) -> Result<SuspensionReport> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integration needs at least one step".into()));
    }
    let h = T::one() / T::from_count(steps);
    let half = h * T::lit(0.5);
    let x = |t: T, z: &DVector<T>| vector_field(fam, t, &PhasePoint::from_vector(z));
    let errors: Vec<f64> = grid
        .par_iter()
        .map(|z0| -> Result<f64> {
            let mut z = z0.to_vector();
            for k in 0..steps {
                let t = h * T::from_count(k);
                let k1 = x(t, &z)?;
                let k2 = x(t + half, &(&z + &k1 * half))?;
                let k3 = x(t + half, &(&z + &k2 * half))?;
                let k4 = x(t + h, &(&z + &k3 * h))?;
                z += (k1 + (k2 + k3) * T::lit(2.0) + k4) * (h / T::lit(6.0));
                if !z.iter().all(|v| v.finite()) {
                    return Err(Error::NonFinite("suspension flow state"));
                }
            }
            let image = target.forward(z0)?;
            Ok(PhasePoint::from_vector(&z).distance(&image).to_f64_lossy())
        })
        .collect::<Result<_>>()?;
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(SuspensionReport { max_error, errors, steps })
}
