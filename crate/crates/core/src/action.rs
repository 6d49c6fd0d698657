//! The discrete action W(q_1..q_dN) = sum_k S_k(q_k, q_{k+1}) on (m, d)
//! configurations, with q_{dN+1} = q_1 + m, and its derivatives.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::genfun::SharedGenFun;
use crate::scalar::Real;
use crate::torus::{circle_offset, wrap_unit, OrbitClass, PhasePoint};

/// The dN free points of a sequence with q_{k+dN} = q_k + m.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration<T: Real> {
    pub points: Vec<DVector<T>>,
    pub cls: OrbitClass,
    /// Number N of distinct maps in the chain cycled d times.
    pub maps: usize,
}

impl<T: Real> Configuration<T> {
    pub fn new(points: Vec<DVector<T>>, cls: OrbitClass, maps: usize) -> Result<Self> {
        let n = cls.dim();
        let expected = cls.d as usize * maps;
        if maps == 0 {
            return Err(Error::EmptyChain);
        }
        if points.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: points.len() });
        }
        if let Some(bad) = points.iter().find(|p| p.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, found: bad.len() });
        }
        Ok(Self { points, cls, maps })
    }

    /// Points q_k = v + k m / (dN), the "rotation" sequence through v.
    pub fn rotation(v: &DVector<T>, cls: &OrbitClass, maps: usize) -> Self {
        let len = cls.d as usize * maps;
        let step = cls.m_vector::<T>() / T::from_count(len);
        let points = (0..len).map(|k| v + &step * T::from_count(k)).collect();
        Self { points, cls: cls.clone(), maps }
    }

    pub fn from_flat(x: &DVector<T>, cls: &OrbitClass, maps: usize) -> Result<Self> {
        let n = cls.dim();
        let len = cls.d as usize * maps;
        if x.len() != n * len {
            return Err(Error::DimensionMismatch { expected: n * len, found: x.len() });
        }
        let points = (0..len).map(|k| x.rows(k * n, n).into_owned()).collect();
        Ok(Self { points, cls: cls.clone(), maps })
    }

    pub fn to_flat(&self) -> DVector<T> {
        let n = self.dim();
        DVector::from_fn(n * self.len(), |i, _| self.points[i / n][i % n])
    }

    pub fn dim(&self) -> usize {
        self.cls.dim()
    }

    /// dN, the number of free points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// q_k for any integer k, using q_{k+dN} = q_k + m.
    pub fn point(&self, k: i64) -> DVector<T> {
        let len = self.len() as i64;
        let wraps = k.div_euclid(len);
        let idx = k.rem_euclid(len) as usize;
        &self.points[idx] + self.cls.m_vector::<T>() * T::lit(wraps as f64)
    }

    /// tau_{m'}: every point shifted by the integer vector m'.
    pub fn translate(&self, shift: &[i64]) -> Self {
        let s = DVector::from_iterator(shift.len(), shift.iter().map(|&k| T::lit(k as f64)));
        Self { points: self.points.iter().map(|p| p + &s).collect(), ..self.clone() }
    }

    /// sigma^j: {q_k} -> {q_{k + jN}}.
    pub fn shift(&self, j: usize) -> Self {
        let offset = (j * self.maps) as i64;
        let points = (0..self.len() as i64).map(|k| self.point(k + offset)).collect();
        Self { points, ..self.clone() }
    }
}

/// W and its derivatives for a chain S_1..S_N and an orbit class.
#[derive(Clone)]
pub struct ActionEvaluator<T: Real> {
    chain: Vec<SharedGenFun<T>>,
    cls: OrbitClass,
}

impl<T: Real> ActionEvaluator<T> {
    pub fn new(chain: Vec<SharedGenFun<T>>, cls: OrbitClass) -> Result<Self> {
        let Some(first) = chain.first() else {
            return Err(Error::EmptyChain);
        };
        let n = first.dim();
        if let Some(bad) = chain.iter().find(|s| s.dim() != n) {
            return Err(Error::DimensionMismatch { expected: n, found: bad.dim() });
        }
        if cls.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, found: cls.dim() });
        }
        Ok(Self { chain, cls })
    }

    pub fn chain(&self) -> &[SharedGenFun<T>] {
        &self.chain
    }

    pub fn class(&self) -> &OrbitClass {
        &self.cls
    }

    pub fn maps(&self) -> usize {
        self.chain.len()
    }

    pub fn dim(&self) -> usize {
        self.cls.dim()
    }

    /// dN.
    pub fn segments(&self) -> usize {
        self.cls.d as usize * self.chain.len()
    }

    /// Number of scalar unknowns, n dN.
    pub fn unknowns(&self) -> usize {
        self.dim() * self.segments()
    }

    fn check(&self, c: &Configuration<T>) -> Result<()> {
        if c.cls != self.cls || c.maps != self.maps() {
            return Err(Error::InvalidArgument("configuration does not match the evaluator's class or chain".into()));
        }
        if c.len() != self.segments() {
            return Err(Error::DimensionMismatch { expected: self.segments(), found: c.len() });
        }
        Ok(())
    }

    /// (S_k, q_k, q_{k+1}) for segment k, wrap term included.
    fn segment(&self, c: &Configuration<T>, k: usize) -> (&SharedGenFun<T>, DVector<T>) {
        (&self.chain[k % self.maps()], c.point(k as i64 + 1))
    }

    pub fn value(&self, c: &Configuration<T>) -> Result<T> {
        self.check(c)?;
        Ok((0..self.segments()).fold(T::zero(), |acc, k| {
            let (s, next) = self.segment(c, k);
            acc + s.value(&c.points[k], &next)
        }))
    }

    /// Block k is d2 S_{k-1}(q_{k-1}, q_k) + d1 S_k(q_k, q_{k+1}) = P_{k-1} - p_k.
    pub fn gradient(&self, c: &Configuration<T>) -> Result<DVector<T>> {
        self.check(c)?;
        let n = self.dim();
        let len = self.segments();
        let mut g = DVector::zeros(n * len);
        for k in 0..len {
            let (s, next) = self.segment(c, k);
            let q = &c.points[k];
            let mut here = g.rows_mut(k * n, n);
            here += s.d1(q, &next);
            let k1 = (k + 1) % len;
            let mut there = g.rows_mut(k1 * n, n);
            there += s.d2(q, &next);
        }
        Ok(g)
    }

    /// Dense block-cyclic-tridiagonal Hessian of W.
    pub fn hessian(&self, c: &Configuration<T>) -> Result<DMatrix<T>> {
        self.check(c)?;
        let n = self.dim();
        let len = self.segments();
        let mut h = DMatrix::zeros(n * len, n * len);
        for k in 0..len {
            let (s, next) = self.segment(c, k);
            let q = &c.points[k];
            let k1 = (k + 1) % len;
            let m12 = s.d12(q, &next);
            let mut b = h.view_mut((k * n, k * n), (n, n));
            b += s.d11(q, &next);
            let mut b = h.view_mut((k1 * n, k1 * n), (n, n));
            b += s.d22(q, &next);
            let mut b = h.view_mut((k * n, k1 * n), (n, n));
            b += &m12;
            let mut b = h.view_mut((k1 * n, k * n), (n, n));
            b += m12.transpose();
        }
        Ok(h)
    }

    /// max_k of the block norm of the gradient; zero exactly at critical points.
    pub fn critical_residual(&self, c: &Configuration<T>) -> Result<T> {
        let g = self.gradient(c)?;
        let n = self.dim();
        Ok((0..self.segments()).fold(T::zero(), |acc, k| acc.max(g.rows(k * n, n).norm())))
    }

    /// Momenta p_k = -d1 S_k(q_k, q_{k+1}) of a critical configuration.
    ///
    /// Returns dN + 1 phase points; the last is the first translated by (m, 0).
    pub fn config_to_orbit(&self, c: &Configuration<T>, tol: T) -> Result<Vec<PhasePoint<T>>> {
        let residual = self.critical_residual(c)?;
        if !(residual <= tol) {
            return Err(Error::NotCritical { residual: residual.to_f64_lossy(), tol: tol.to_f64_lossy() });
        }
        let len = self.segments();
        let mut orbit: Vec<PhasePoint<T>> = (0..len)
            .map(|k| {
                let (s, next) = self.segment(c, k);
                PhasePoint { q: c.points[k].clone(), p: -s.d1(&c.points[k], &next) }
            })
            .collect();
        let first = &orbit[0];
        orbit.push(PhasePoint { q: &first.q + self.cls.m_vector::<T>(), p: first.p.clone() });
        Ok(orbit)
    }
}

pub fn action_value<T: Real>(e: &ActionEvaluator<T>, c: &Configuration<T>) -> Result<T> {
    e.value(c)
}

pub fn action_gradient<T: Real>(e: &ActionEvaluator<T>, c: &Configuration<T>) -> Result<DVector<T>> {
    e.gradient(c)
}

pub fn action_hessian<T: Real>(e: &ActionEvaluator<T>, c: &Configuration<T>) -> Result<DMatrix<T>> {
    e.hessian(c)
}

pub fn critical_residual<T: Real>(e: &ActionEvaluator<T>, c: &Configuration<T>) -> Result<T> {
    e.critical_residual(c)
}

pub fn config_to_orbit<T: Real>(e: &ActionEvaluator<T>, c: &Configuration<T>, tol: T) -> Result<Vec<PhasePoint<T>>> {
    e.config_to_orbit(c, tol)
}

/// Tolerance below which gap sequences are compared as equal.
pub const SHIFT_TIE_TOL: f64 = 1e-9;

/// Coordinates of a configuration modulo tau and sigma: the mean point `v`
/// reduced to [0,1)^n and the gaps t_k = q_k - q_{k-1} - m/(dN).
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalForm<T: Real> {
    pub v: DVector<T>,
    pub t: Vec<DVector<T>>,
    /// The sigma power j that produced the representative.
    pub shift_index: usize,
}

impl<T: Real> CanonicalForm<T> {
    /// A configuration with these coordinates (mean exactly `v`).
    pub fn to_configuration(&self, cls: &OrbitClass, maps: usize) -> Configuration<T> {
        let len = self.t.len();
        let step = cls.m_vector::<T>() / T::from_count(len);
        let mut partial = DVector::zeros(cls.dim());
        let mut offsets = Vec::with_capacity(len);
        offsets.push(partial.clone());
        for k in 1..len {
            partial += &self.t[k] + &step;
            offsets.push(partial.clone());
        }
        let mean = offsets.iter().fold(DVector::zeros(cls.dim()), |a, o| a + o) / T::from_count(len);
        let q0 = &self.v - mean;
        Configuration { points: offsets.into_iter().map(|o| &q0 + o).collect(), cls: cls.clone(), maps }
    }

    /// Sup-norm distance, with `v` compared on the circle.
    pub fn distance(&self, other: &Self) -> T {
        let dv = self.v.iter().zip(other.v.iter()).fold(T::zero(), |a, (x, y)| a.max(circle_offset(*x - *y).abs()));
        self.t.iter().zip(&other.t).fold(dv, |a, (x, y)| a.max((x - y).amax()))
    }
}

fn raw_coordinates<T: Real>(c: &Configuration<T>) -> (DVector<T>, Vec<DVector<T>>) {
    let len = c.len();
    let step = c.cls.m_vector::<T>() / T::from_count(len);
    let mean = c.points.iter().fold(DVector::zeros(c.dim()), |a, p| a + p) / T::from_count(len);
    let v = mean.map(wrap_unit);
    let t = (0..len as i64).map(|k| c.point(k) - c.point(k - 1) - &step).collect();
    (v, t)
}

fn lex_cmp<T: Real>(a: impl Iterator<Item = T>, b: impl Iterator<Item = T>, tol: T) -> Ordering {
    for (x, y) in a.zip(b) {
        if (x - y).abs() > tol {
            return if x < y { Ordering::Less } else { Ordering::Greater };
        }
    }
    Ordering::Equal
}

/// Picks the sigma power whose gap sequence is lexicographically smallest
/// (ties within [`SHIFT_TIE_TOL`] broken by the reduced mean, then by index).
pub fn canonicalize<T: Real>(c: &Configuration<T>) -> CanonicalForm<T> {
    let tol = T::lit(SHIFT_TIE_TOL);
    let mut best: Option<CanonicalForm<T>> = None;
    for j in 0..c.cls.d as usize {
        let (v, t) = raw_coordinates(&c.shift(j));
        let cand = CanonicalForm { v, t, shift_index: j };
        let better = match &best {
            None => true,
            Some(b) => {
                let by_gaps = lex_cmp(
                    cand.t.iter().flat_map(|x| x.iter().copied()),
                    b.t.iter().flat_map(|x| x.iter().copied()),
                    tol,
                );
                let by_mean = lex_cmp(cand.v.iter().copied(), b.v.iter().copied(), tol);
                by_gaps.then(by_mean) == Ordering::Less
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best.expect("d >= 1")
}
