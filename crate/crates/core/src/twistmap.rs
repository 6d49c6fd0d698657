//! Twist maps defined by their generating functions, and finite chains of
//! them.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::genfun::{certify_convexity, GeneratingFunction, SamplingSpec, SharedGenFun, TwistConstants};
use crate::linalg;
use crate::scalar::Real;
use crate::torus::{symplectic_j, PhasePoint};

/// Tolerances of the Newton solves that invert the generating relations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 50 }
    }
}

/// A map evaluated directly rather than through its generating function,
/// e.g. a short-time Hamiltonian flow.
pub trait ExplicitMap<T: Real>: Send + Sync {
    fn forward(&self, z: &PhasePoint<T>) -> Result<PhasePoint<T>>;
    fn inverse(&self, z: &PhasePoint<T>) -> Result<PhasePoint<T>>;
    fn tangent(&self, z: &PhasePoint<T>) -> Result<DMatrix<T>>;
}

/// A lift of a symplectic twist map with certified twist constants.
#[derive(Clone)]
pub struct TwistMap<T: Real> {
    genfun: SharedGenFun<T>,
    constants: TwistConstants,
    explicit: Option<Arc<dyn ExplicitMap<T>>>,
    settings: SolverSettings,
}

impl<T: Real> std::fmt::Debug for TwistMap<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TwistMap")
            .field("label", &self.genfun.label())
            .field("constants", &self.constants)
            .field("explicit", &self.explicit.is_some())
            .finish()
    }
}

impl<T: Real> TwistMap<T> {
    /// Wraps a generating function whose twist constants are already known.
    pub fn new(genfun: SharedGenFun<T>, constants: TwistConstants) -> Result<Self> {
        if !(constants.a > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "twist map requires a certified convexity margin, got a = {}",
                constants.a
            )));
        }
        Ok(Self { genfun, constants, explicit: None, settings: SolverSettings::default() })
    }

    /// Certifies convexity on `spec` and wraps the generating function.
    pub fn certify(genfun: SharedGenFun<T>, spec: &SamplingSpec) -> Result<Self> {
        let constants = certify_convexity(genfun.as_ref(), spec)?;
        Self::new(genfun, constants)
    }

    /// Evaluates through `explicit` while keeping `genfun` for the variational
    /// side.
    pub fn with_explicit(mut self, explicit: Arc<dyn ExplicitMap<T>>) -> Self {
        self.explicit = Some(explicit);
        self
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn genfun(&self) -> &SharedGenFun<T> {
        &self.genfun
    }

    pub fn constants(&self) -> &TwistConstants {
        &self.constants
    }

    pub fn dim(&self) -> usize {
        self.genfun.dim()
    }

    pub fn is_explicit(&self) -> bool {
        self.explicit.is_some()
    }

    fn effective_tol(&self, scale: T) -> T {
        let floor = T::default_epsilon() * T::lit(64.0);
        T::lit(self.settings.tol).max(floor) * (T::one() + scale)
    }

    /// (q, p) -> (Q, P) with p = -d1 S(q, Q), P = d2 S(q, Q).
    pub fn forward(&self, z: &PhasePoint<T>) -> Result<PhasePoint<T>> {
        self.check_dim(z)?;
        if let Some(e) = &self.explicit {
            return e.forward(z);
        }
        let big_q = self.solve_forward(&z.q, &z.p)?;
        let big_p = self.genfun.d2(&z.q, &big_q);
        Ok(PhasePoint { q: big_q, p: big_p })
    }

    /// Solves d1 S(q, Q) + p = 0 for Q by damped Newton.
    fn solve_forward(&self, q: &DVector<T>, p: &DVector<T>) -> Result<DVector<T>> {
        let s = self.genfun.as_ref();
        let tol = self.effective_tol(p.norm());
        let residual = |big_q: &DVector<T>| s.d1(q, big_q) + p;
        let jacobian = |big_q: &DVector<T>| s.d12(q, big_q);

        let mut starts = Vec::with_capacity(2);
        if let Ok(a_eff) = linalg::inverse(&s.d12(q, q), "d12 S on the diagonal") {
            starts.push(q - a_eff * p);
        }
        starts.push(q.clone());
        damped_newton(&starts, residual, jacobian, tol, self.settings.max_iter)
    }

    /// (Q, P) -> (q, p), solving d2 S(q, Q) = P for q.
    pub fn inverse(&self, z: &PhasePoint<T>) -> Result<PhasePoint<T>> {
        self.check_dim(z)?;
        if let Some(e) = &self.explicit {
            return e.inverse(z);
        }
        let s = self.genfun.as_ref();
        let (big_q, big_p) = (&z.q, &z.p);
        let tol = self.effective_tol(big_p.norm());
        let residual = |q: &DVector<T>| s.d2(q, big_q) - big_p;
        let jacobian = |q: &DVector<T>| s.d12(q, big_q).transpose();
        let mut starts = Vec::with_capacity(2);
        if let Ok(a_eff) = linalg::inverse(&s.d12(big_q, big_q), "d12 S on the diagonal") {
            starts.push(big_q + a_eff * big_p);
        }
        starts.push(big_q.clone());
        let q = damped_newton(&starts, residual, jacobian, tol, self.settings.max_iter)?;
        let p = -s.d1(&q, big_q);
        Ok(PhasePoint { q, p })
    }

    /// Differential of the map at z, by implicit differentiation of the
    /// generating relations. The upper-right block is -(d12 S)^{-1}.
    pub fn tangent(&self, z: &PhasePoint<T>) -> Result<DMatrix<T>> {
        self.check_dim(z)?;
        if let Some(e) = &self.explicit {
            return e.tangent(z);
        }
        let image = self.forward(z)?;
        Ok(tangent_from_genfun(self.genfun.as_ref(), &z.q, &image.q))
    }

    /// |p + d1 S(q, Q)| + |P - d2 S(q, Q)| at the image of z.
    pub fn generating_residual(&self, z: &PhasePoint<T>) -> Result<T> {
        let image = self.forward(z)?;
        let s = self.genfun.as_ref();
        Ok((&z.p + s.d1(&z.q, &image.q)).norm() + (&image.p - s.d2(&z.q, &image.q)).norm())
    }

    fn check_dim(&self, z: &PhasePoint<T>) -> Result<()> {
        if z.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: z.dim() });
        }
        Ok(())
    }
}

/// Assembles DF = [[dQ/dq, dQ/dp], [dP/dq, dP/dp]] from the second
/// derivatives of S at (q, Q).
pub fn tangent_from_genfun<T: Real>(s: &dyn GeneratingFunction<T>, q: &DVector<T>, big_q: &DVector<T>) -> DMatrix<T> {
    let n = q.len();
    let m = s.d12(q, big_q);
    let s11 = s.d11(q, big_q);
    let s22 = s.d22(q, big_q);
    // d12 is nonsingular wherever the map is certified; a NaN block flags it otherwise.
    let m_inv = m.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(n, n, T::lit(f64::NAN)));
    let dq_dp = -&m_inv;
    let dq_dq = -(&m_inv * &s11);
    let dp_dq = m.transpose() + &s22 * &dq_dq;
    let dp_dp = &s22 * &dq_dp;
    let mut df = DMatrix::zeros(2 * n, 2 * n);
    df.view_mut((0, 0), (n, n)).copy_from(&dq_dq);
    df.view_mut((0, n), (n, n)).copy_from(&dq_dp);
    df.view_mut((n, 0), (n, n)).copy_from(&dp_dq);
    df.view_mut((n, n), (n, n)).copy_from(&dp_dp);
    df
}

/// Newton with step halving until the residual norm decreases. Tries each
/// start in turn.
pub(crate) fn damped_newton<T: Real>(
    starts: &[DVector<T>],
    residual: impl Fn(&DVector<T>) -> DVector<T>,
    jacobian: impl Fn(&DVector<T>) -> DMatrix<T>,
    tol: T,
    max_iter: usize,
) -> Result<DVector<T>> {
    let mut last = (0usize, f64::INFINITY);
    for start in starts {
        let mut x = start.clone();
        let mut r = residual(&x);
        let mut rn = r.norm();
        let mut iterations = 0;
        let mut stalled = false;
        while !(rn <= tol) && iterations < max_iter {
            iterations += 1;
            let Ok(step) = linalg::solve(&jacobian(&x), &r, "Newton jacobian") else {
                stalled = true;
                break;
            };
            let mut lambda = T::one();
            let mut improved = false;
            for _ in 0..40 {
                let trial = &x - &step * lambda;
                let rt = residual(&trial);
                let rtn = rt.norm();
                if rtn < rn {
                    x = trial;
                    r = rt;
                    rn = rtn;
                    improved = true;
                    break;
                }
                lambda *= T::lit(0.5);
            }
            if !improved {
                stalled = true;
                break;
            }
        }
        if rn <= tol {
            return Ok(x);
        }
        // A stall just above tolerance is rounding noise, not divergence.
        if stalled && rn <= tol * T::lit(100.0) {
            return Ok(x);
        }
        last = (iterations, rn.to_f64_lossy());
    }
    Err(Error::NewtonDivergence { iterations: last.0, residual: last.1 })
}

/// Frobenius norm of DF^T J DF - J.
pub fn check_symplectic<T: Real>(df: &DMatrix<T>) -> Result<T> {
    if !df.is_square() || df.nrows() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "symplectic check needs a square even-dimensional matrix, got {}x{}",
            df.nrows(),
            df.ncols()
        )));
    }
    let j = symplectic_j::<T>(df.nrows() / 2);
    Ok((df.transpose() * &j * df - j).norm())
}

/// F = F_N o ... o F_1.
#[derive(Debug, Clone)]
pub struct MapChain<T: Real> {
    maps: Vec<TwistMap<T>>,
}

pub fn compose<T: Real>(maps: Vec<TwistMap<T>>) -> Result<MapChain<T>> {
    let Some(first) = maps.first() else {
        return Err(Error::EmptyChain);
    };
    let n = first.dim();
    if let Some(bad) = maps.iter().find(|m| m.dim() != n) {
        return Err(Error::DimensionMismatch { expected: n, found: bad.dim() });
    }
    Ok(MapChain { maps })
}

impl<T: Real> MapChain<T> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.maps[0].dim()
    }

    pub fn maps(&self) -> &[TwistMap<T>] {
        &self.maps
    }

    pub fn generating_functions(&self) -> Vec<SharedGenFun<T>> {
        self.maps.iter().map(|m| m.genfun().clone()).collect()
    }

    pub fn forward(&self, z: &PhasePoint<T>) -> Result<PhasePoint<T>> {
        self.maps.iter().try_fold(z.clone(), |acc, m| m.forward(&acc))
    }

    pub fn inverse(&self, z: &PhasePoint<T>) -> Result<PhasePoint<T>> {
        self.maps.iter().rev().try_fold(z.clone(), |acc, m| m.inverse(&acc))
    }

    /// Chain rule: DF = DF_N(z_{N-1}) ... DF_1(z_0).
    pub fn tangent(&self, z: &PhasePoint<T>) -> Result<DMatrix<T>> {
        let n = self.dim();
        let mut acc = DMatrix::identity(2 * n, 2 * n);
        let mut point = z.clone();
        for m in &self.maps {
            acc = m.tangent(&point)? * acc;
            point = m.forward(&point)?;
        }
        Ok(acc)
    }
}
