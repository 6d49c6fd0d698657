//! Points of the universal cover R^n of T^n, phase points of R^2n,
//! deck translations, orbit classes and the standard symplectic matrix.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A point of R^n, the universal cover of the torus.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverPoint<T: Real>(DVector<T>);

impl<T: Real> CoverPoint<T> {
    pub fn new(coords: DVector<T>) -> Result<Self> {
        if coords.iter().any(|c| !c.finite()) {
            return Err(Error::NonFinite("cover point"));
        }
        Ok(Self(coords))
    }

    pub fn from_slice(coords: &[T]) -> Result<Self> {
        Self::new(DVector::from_column_slice(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> DVector<T> {
        self.0
    }
}

impl<T: Real> Deref for CoverPoint<T> {
    type Target = DVector<T>;

    fn deref(&self) -> &DVector<T> {
        &self.0
    }
}

/// Canonical representative of `x` in the half-open fundamental domain [0,1)^n.
pub fn reduce_to_torus<T: Real>(x: &CoverPoint<T>) -> CoverPoint<T> {
    CoverPoint(x.0.map(wrap_unit))
}

/// Reduces a scalar to [0,1). Rounding can push `x - floor(x)` up to exactly
/// 1 for tiny negative inputs; those map to 0.
pub(crate) fn wrap_unit<T: Real>(x: T) -> T {
    let r = x - x.floor();
    if r >= T::one() {
        T::zero()
    } else {
        r
    }
}

/// Signed distance from `x` to the nearest integer, in [-1/2, 1/2].
pub(crate) fn circle_offset<T: Real>(x: T) -> T {
    x - x.round()
}

/// A point (q, p) of the cover R^2n of T*T^n.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint<T: Real> {
    pub q: DVector<T>,
    pub p: DVector<T>,
}

impl<T: Real> PhasePoint<T> {
    pub fn new(q: DVector<T>, p: DVector<T>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::DimensionMismatch { expected: q.len(), found: p.len() });
        }
        Ok(Self { q, p })
    }

    pub fn from_slices(q: &[T], p: &[T]) -> Result<Self> {
        Self::new(DVector::from_column_slice(q), DVector::from_column_slice(p))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Stacks (q, p) into one vector of length 2n.
    pub fn to_vector(&self) -> DVector<T> {
        let n = self.dim();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.p[i - n] })
    }

    pub fn from_vector(z: &DVector<T>) -> Self {
        let n = z.len() / 2;
        Self { q: z.rows(0, n).into_owned(), p: z.rows(n, n).into_owned() }
    }

    /// Euclidean distance in R^2n.
    pub fn distance(&self, other: &Self) -> T {
        ((&self.q - &other.q).norm_squared() + (&self.p - &other.p).norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|x| x.finite())
    }
}

/// The deck transformation (q, p) -> (q + m, p).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeckTranslation {
    pub m: Vec<i64>,
}

impl DeckTranslation {
    pub fn new(m: Vec<i64>) -> Self {
        Self { m }
    }

    pub fn zero(n: usize) -> Self {
        Self { m: vec![0; n] }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self { m: self.m.iter().zip(&other.m).map(|(a, b)| a + b).collect() }
    }

    pub fn as_vector<T: Real>(&self) -> DVector<T> {
        DVector::from_iterator(self.m.len(), self.m.iter().map(|&k| T::lit(k as f64)))
    }
}

/// Applies a deck translation to a phase point; the momentum is untouched.
pub fn deck_translate<T: Real>(z: &PhasePoint<T>, t: &DeckTranslation) -> Result<PhasePoint<T>> {
    if t.m.len() != z.dim() {
        return Err(Error::DimensionMismatch { expected: z.dim(), found: t.m.len() });
    }
    Ok(PhasePoint { q: &z.q + t.as_vector::<T>(), p: z.p.clone() })
}

/// The type (m, d) of a periodic orbit: F^d(q, p) = (q + m, p) on the cover.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrbitClass {
    pub m: Vec<i64>,
    pub d: u32,
}

impl OrbitClass {
    pub fn new(m: Vec<i64>, d: u32) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("orbit class period d must be >= 1".into()));
        }
        if m.is_empty() {
            return Err(Error::InvalidArgument("orbit class needs a non-empty m".into()));
        }
        Ok(Self { m, d })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Prime means some component m_k is coprime with d.
    pub fn is_prime(&self) -> bool {
        self.m.iter().any(|&mk| gcd(mk.unsigned_abs(), u64::from(self.d)) == 1)
    }

    pub fn translation(&self) -> DeckTranslation {
        DeckTranslation::new(self.m.clone())
    }

    pub fn m_vector<T: Real>(&self) -> DVector<T> {
        self.translation().as_vector()
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

/// The 2n x 2n matrix [[0, -I], [I, 0]].
pub fn symplectic_j<T: Real>(n: usize) -> DMatrix<T> {
    DMatrix::from_fn(2 * n, 2 * n, |i, j| {
        if i < n && j == i + n {
            -T::one()
        } else if i >= n && j + n == i {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(x: &[f64]) -> CoverPoint<f64> {
        CoverPoint::from_slice(x).unwrap()
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(reduce_to_torus(&cp(&[1.25, -0.5])).as_slice(), &[0.25, 0.5]);
        assert_eq!(reduce_to_torus(&cp(&[0.0])).as_slice(), &[0.0]);
        assert_eq!(reduce_to_torus(&cp(&[3.0, 7.0])).as_slice(), &[0.0, 0.0]);
        // rounding edge: -1e-20 - floor(-1e-20) == 1.0 in f64
        assert_eq!(reduce_to_torus(&cp(&[-1e-20])).as_slice(), &[0.0]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(CoverPoint::from_slice(&[f64::NAN]).is_err());
        assert!(CoverPoint::from_slice(&[0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn deck_translate_examples() {
        let z = PhasePoint::from_slices(&[0.2], &[0.3]).unwrap();
        let w = deck_translate(&z, &DeckTranslation::new(vec![1])).unwrap();
        assert_eq!(w.q[0], 1.2);
        assert_eq!(f64::to_bits(w.p[0]), 0.3f64.to_bits());
        assert_eq!(deck_translate(&z, &DeckTranslation::zero(1)).unwrap(), z);
        assert!(deck_translate(&z, &DeckTranslation::new(vec![1, 0])).is_err());
    }

    #[test]
    fn deck_group_law() {
        let z = PhasePoint::from_slices(&[0.2, -0.7], &[1.5, 2.5]).unwrap();
        let a = DeckTranslation::new(vec![1, -2]);
        let b = DeckTranslation::new(vec![3, 4]);
        let two_step = deck_translate(&deck_translate(&z, &a).unwrap(), &b).unwrap();
        let one_step = deck_translate(&z, &a.compose(&b)).unwrap();
        assert!(two_step.distance(&one_step) < 1e-15);
        assert_eq!(two_step.p, one_step.p);
    }

    #[test]
    fn primality() {
        assert!(OrbitClass::new(vec![0], 1).unwrap().is_prime());
        assert!(OrbitClass::new(vec![1, 0], 1).unwrap().is_prime());
        assert!(!OrbitClass::new(vec![2], 4).unwrap().is_prime());
        assert!(OrbitClass::new(vec![2, 3], 4).unwrap().is_prime());
        assert!(!OrbitClass::new(vec![0], 2).unwrap().is_prime());
        assert!(OrbitClass::new(vec![1], 0).is_err());
    }

    #[test]
    fn j_squares_to_minus_identity() {
        for n in 1..5 {
            let j = symplectic_j::<f64>(n);
            let id = DMatrix::<f64>::identity(2 * n, 2 * n);
            assert_eq!(&j * &j, -&id);
            assert_eq!(j.transpose(), -&j);
            assert_eq!((j.transpose() * &j - &id).norm(), 0.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn reduce_is_idempotent_and_integral(x in proptest::collection::vec(-1e6f64..1e6, 1..4)) {
            let p = cp(&x);
            let r = reduce_to_torus(&p);
            proptest::prop_assert_eq!(reduce_to_torus(&r), r.clone());
            for (a, b) in r.iter().zip(p.iter()) {
                proptest::prop_assert!((0.0..1.0).contains(a));
                let k = b - a;
                proptest::prop_assert!((k - k.round()).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }
}
