//! Critical points of the discrete action: minimization, multistart Newton
//! with deflation for saddles, Morse indices and counting modulo tau, sigma.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{canonicalize, ActionEvaluator, CanonicalForm, Configuration};
use crate::error::{Error, Result};
use crate::linalg::{pinv_solve, sym_eigenvalues, sym_min_eigenpair};
use crate::scalar::Real;
use crate::torus::{OrbitClass, PhasePoint};
use crate::twistmap::MapChain;

/// Morse index of a critical point, or `Degenerate` if the Hessian has a
/// (numerically) zero eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorseIndex {
    Index(usize),
    Degenerate,
}

impl std::fmt::Display for MorseIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MorseIndex::Index(k) => write!(f, "{k}"),
            MorseIndex::Degenerate => f.write_str("degenerate"),
        }
    }
}

/// Tunables of the critical-point search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSettings {
    /// Grid points per axis for the mean coordinate; each is repeated d times
    /// with a fractional offset, giving per_axis^n * d starts.
    pub grid_per_axis: usize,
    pub random_starts: usize,
    pub seed: u64,
    /// Half-width of the uniform perturbation added to every point of a random start.
    pub random_spread: f64,
    /// Residual at which a critical point is accepted.
    pub tol: f64,
    pub max_newton: usize,
    /// A deflated start is abandoned after this many iterations without a 10%
    /// drop of its best merit value.
    pub stall_iterations: usize,
    pub max_descent: usize,
    pub deflation_radius: f64,
    pub dedup_tol: f64,
    /// Relative to the largest |eigenvalue| of the Hessian.
    pub degeneracy_tol: f64,
    /// Starts processed concurrently between two registry updates.
    pub batch: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            grid_per_axis: 3,
            random_starts: 200,
            seed: 0,
            random_spread: 0.25,
            tol: 1e-10,
            max_newton: 60,
            stall_iterations: 8,
            max_descent: 20_000,
            deflation_radius: 0.1,
            dedup_tol: 1e-5,
            degeneracy_tol: 1e-7,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OrbitRecord<T: Real> {
    pub canonical: CanonicalForm<T>,
    pub config: Configuration<T>,
    pub phase_points: Vec<PhasePoint<T>>,
    pub action: T,
    pub residual: T,
    pub morse_index: MorseIndex,
    pub hessian_min_abs_eig: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitCountReport {
    pub found: usize,
    /// Cup-length bound n + 1.
    pub lower_bound_lyusternik: usize,
    /// Sum of Betti numbers of T^n, 2^n.
    pub lower_bound_morse: usize,
    pub all_nondegenerate: bool,
    /// census[k] = number of nondegenerate orbits of index k.
    pub census: Vec<usize>,
    pub degenerate: usize,
    pub starts: usize,
}

impl OrbitCountReport {
    /// Whether census[k] >= C(n, k) for k = 0..=n.
    pub fn census_respects_binomials(&self, n: usize) -> bool {
        (0..=n).all(|k| self.census.get(k).copied().unwrap_or(0) >= binomial(n, k))
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Hessian spectrum classification with threshold `rel_tol * max|eig|`.
fn classify<T: Real>(hessian: &DMatrix<T>, rel_tol: f64) -> (MorseIndex, T) {
    let eig = sym_eigenvalues(hessian);
    let max_abs = eig.iter().fold(T::zero(), |a, e| a.max(e.abs()));
    let min_abs = eig.iter().fold(T::lit(f64::INFINITY), |a, e| a.min(e.abs()));
    let thr = T::lit(rel_tol) * max_abs;
    if max_abs == T::zero() || min_abs <= thr {
        return (MorseIndex::Degenerate, min_abs);
    }
    (MorseIndex::Index(eig.iter().filter(|&&e| e < -thr).count()), min_abs)
}

pub fn morse_index<T: Real>(e: &ActionEvaluator<T>, c: &Configuration<T>, degeneracy_tol: f64, tol: T) -> Result<MorseIndex> {
    let residual = e.critical_residual(c)?;
    if !(residual <= tol) {
        return Err(Error::NotCritical { residual: residual.to_f64_lossy(), tol: tol.to_f64_lossy() });
    }
    Ok(classify(&e.hessian(c)?, degeneracy_tol).0)
}

/// Packages a critical configuration with its certificates.
pub fn certify_record<T: Real>(e: &ActionEvaluator<T>, config: Configuration<T>, settings: &SearchSettings) -> Result<OrbitRecord<T>> {
    let tol = T::lit(settings.tol);
    let phase_points = e.config_to_orbit(&config, tol)?;
    let (morse_index, hessian_min_abs_eig) = classify(&e.hessian(&config)?, settings.degeneracy_tol);
    Ok(OrbitRecord {
        canonical: canonicalize(&config),
        action: e.value(&config)?,
        residual: e.critical_residual(&config)?,
        phase_points,
        config,
        morse_index,
        hessian_min_abs_eig,
    })
}

/// Default dedup tolerance in canonical coordinates.
pub const DEDUP_TOL: f64 = 1e-5;

/// Whether two records are different orbits modulo tau and sigma.
pub fn distinct<T: Real>(a: &OrbitRecord<T>, b: &OrbitRecord<T>) -> bool {
    distinct_within(&a.canonical, &b.canonical, &a.config.cls, a.config.maps, DEDUP_TOL)
}

/// Compares `a` against every sigma-shift of `b`, which makes the test robust
/// when the lexicographic choice of representative is itself a near tie.
/// A shift by j rotates the gaps by jN and moves the mean by j m / d.
pub fn distinct_within<T: Real>(a: &CanonicalForm<T>, b: &CanonicalForm<T>, cls: &OrbitClass, maps: usize, tol: f64) -> bool {
    let len = b.t.len();
    if a.t.len() != len || len == 0 {
        return true;
    }
    let tol = T::lit(tol);
    let m = cls.m_vector::<T>();
    (0..cls.d as usize).all(|j| {
        let rotated = CanonicalForm {
            v: &b.v + &m * (T::from_count(j) / T::from_count(cls.d as usize)),
            t: (0..len).map(|k| b.t[(k + j * maps) % len].clone()).collect(),
            shift_index: 0,
        };
        a.distance(&rotated) > tol
    })
}

/// Descent with Armijo backtracking, switching to Newton (pseudo-inverse)
/// steps whenever they decrease W. Converges to a local minimum.
pub fn minimize_action<T: Real>(e: &ActionEvaluator<T>, start: &Configuration<T>, settings: &SearchSettings) -> Result<OrbitRecord<T>> {
    let cls = e.class().clone();
    let maps = e.maps();
    let mut x = start.to_flat();
    let at = |x: &DVector<T>| Configuration::from_flat(x, &cls, maps);
    let tol = T::lit(settings.tol);
    let mut w = e.value(&at(&x)?)?;
    let mut step = T::one();
    for _ in 0..settings.max_descent {
        let c = at(&x)?;
        let g = e.gradient(&c)?;
        let h = e.hessian(&c)?;
        let (idx, _) = classify(&h, settings.degeneracy_tol);
        if e.critical_residual(&c)? < tol * T::lit(0.1) {
            if let MorseIndex::Index(k) = idx {
                if k > 0 {
                    // stalled on a saddle or maximum: leave along a descent direction
                    let (_, dir) = sym_min_eigenpair(&h);
                    x += dir * T::lit(1e-2);
                    w = e.value(&at(&x)?)?;
                    continue;
                }
            }
            return certify_record(e, polish(e, c, settings), settings);
        }
        let slack = T::lit(1e-13) * (T::one() + w.abs());
        // Newton is only trusted where the Hessian is (numerically) positive semidefinite
        if matches!(idx, MorseIndex::Index(0) | MorseIndex::Degenerate) {
            let delta = -pinv_solve(&h, &g, T::lit(1e-10));
            let trial = &x + &delta;
            let wt = e.value(&at(&trial)?)?;
            if wt <= w + slack && delta.dot(&g) <= T::zero() {
                let gt = e.gradient(&at(&trial)?)?;
                if gt.norm() < g.norm() {
                    x = trial;
                    w = wt;
                    continue;
                }
            }
        }
        let gg = g.norm_squared();
        let mut t = (step * T::lit(2.0)).min(T::lit(4.0));
        loop {
            let trial = &x - &g * t;
            let wt = e.value(&at(&trial)?)?;
            if wt <= w - T::lit(1e-4) * t * gg || t < T::lit(1e-12) {
                x = trial;
                w = wt;
                step = t;
                break;
            }
            t *= T::lit(0.5);
        }
    }
    let residual = e.critical_residual(&at(&x)?)?;
    Err(Error::IterationCapExceeded { cap: settings.max_descent, residual: residual.to_f64_lossy() })
}

/// Plain Newton steps for as long as they keep reducing the residual. At a
/// degenerate critical point the position error scales like a root of the
/// residual, so the extra digits matter for deduplication.
fn polish<T: Real>(e: &ActionEvaluator<T>, c: Configuration<T>, settings: &SearchSettings) -> Configuration<T> {
    let mut best = c;
    let Ok(mut res) = e.critical_residual(&best) else { return best };
    for _ in 0..settings.max_newton {
        let (Ok(g), Ok(h)) = (e.gradient(&best), e.hessian(&best)) else { break };
        let x = best.to_flat() - pinv_solve(&h, &g, T::lit(1e-12));
        let Ok(next) = Configuration::from_flat(&x, &best.cls, best.maps) else { break };
        match e.critical_residual(&next) {
            Ok(r) if r < res => {
                res = r;
                best = next;
            }
            _ => break,
        }
    }
    best
}

/// Representative of `known` closest to `x` among its sigma shifts and
/// integer translations, flattened.
fn nearest_representative<T: Real>(x: &Configuration<T>, known: &Configuration<T>) -> DVector<T> {
    let n = x.dim();
    let len = x.len();
    let mut best: Option<(T, DVector<T>)> = None;
    for j in 0..x.cls.d as usize {
        let s = known.shift(j);
        let shift: Vec<i64> = (0..n)
            .map(|i| {
                let mean = (0..len).fold(T::zero(), |a, k| a + x.points[k][i] - s.points[k][i]) / T::from_count(len);
                mean.round().to_f64_lossy() as i64
            })
            .collect();
        let r = s.translate(&shift).to_flat();
        let dist = (&x.to_flat() - &r).norm_squared();
        if best.as_ref().is_none_or(|(b, _)| dist < *b) {
            best = Some((dist, r));
        }
    }
    best.expect("d >= 1").1
}

struct Deflation<T: Real> {
    reps: Vec<DVector<T>>,
    radius: T,
}

impl<T: Real> Deflation<T> {
    fn new(x: &Configuration<T>, known: &[Configuration<T>], radius: f64) -> Self {
        Self { reps: known.iter().map(|k| nearest_representative(x, k)).collect(), radius: T::lit(radius) }
    }

    /// (log m, grad log m) at the flat point `x`.
    fn log_factor(&self, x: &DVector<T>) -> (T, DVector<T>) {
        let r2 = self.radius * self.radius;
        let mut val = T::zero();
        let mut grad = DVector::zeros(x.len());
        for rep in &self.reps {
            let diff = x - rep;
            let d2 = diff.norm_squared().max(T::lit(1e-300));
            val += (T::one() + r2 / d2).ln();
            grad -= diff * (T::lit(2.0) * r2 / (d2 * (d2 + r2)));
        }
        (val, grad)
    }
}

/// Newton on grad W = 0, deflated away from `known` orbits.
fn deflated_newton<T: Real>(
    e: &ActionEvaluator<T>,
    start: &Configuration<T>,
    known: &[Configuration<T>],
    settings: &SearchSettings,
) -> Option<Configuration<T>> {
    let cls = e.class();
    let maps = e.maps();
    let tol = T::lit(settings.tol);
    let mut x = start.to_flat();
    let at = |x: &DVector<T>| Configuration::from_flat(x, cls, maps).ok();
    // deflation is anchored at the start; the nearest representatives are
    // refreshed lazily only if the iterate wanders more than half a period
    let mut defl = Deflation::new(start, known, settings.deflation_radius);
    let mut anchor = x.clone();
    let merit = |x: &DVector<T>, defl: &Deflation<T>| -> Option<T> {
        let g = e.gradient(&at(x)?).ok()?;
        Some(defl.log_factor(x).0.exp() * g.norm())
    };
    let mut best_merit = T::lit(f64::INFINITY);
    let mut stalled = 0;
    for _ in 0..settings.max_newton {
        let c = at(&x)?;
        if (&x - &anchor).amax() > T::lit(0.5) {
            defl = Deflation::new(&c, known, settings.deflation_radius);
            anchor = x.clone();
        }
        if e.critical_residual(&c).ok()? < tol {
            return Some(c);
        }
        let g = e.gradient(&c).ok()?;
        let h = e.hessian(&c).ok()?;
        let delta = -pinv_solve(&h, &g, T::lit(1e-12));
        let (_, grad_log) = defl.log_factor(&x);
        let eta = grad_log.dot(&delta);
        let denom = T::one() - eta;
        let full = if denom.abs() > T::lit(1e-3) { delta / denom } else { delta };
        let m0 = merit(&x, &defl)?;
        // deflated merits often plateau on a ring around a known root
        if m0 < best_merit * T::lit(0.9) {
            best_merit = m0;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= settings.stall_iterations {
                return None;
            }
        }
        let mut t = T::one();
        let mut next = &x + &full * t;
        while t > T::lit(1.0 / 64.0) {
            if merit(&next, &defl).is_some_and(|m| m < m0) {
                break;
            }
            t *= T::lit(0.5);
            next = &x + &full * t;
        }
        if !next.iter().all(|v| v.finite()) {
            return None;
        }
        x = next;
    }
    let c = at(&x)?;
    (e.critical_residual(&c).ok()? < tol).then_some(c)
}

/// Deterministic starts: rotation sequences through a grid of mean points,
/// then random perturbations of random rotations.
pub fn multistart_configurations<T: Real>(cls: &OrbitClass, maps: usize, settings: &SearchSettings) -> Vec<Configuration<T>> {
    let n = cls.dim();
    let d = cls.d as usize;
    let k = settings.grid_per_axis.max(1);
    let mut starts = Vec::new();
    for flat in 0..k.pow(n as u32) {
        for j in 0..d {
            let v = DVector::from_fn(n, |i, _| {
                let digit = (flat / k.pow(i as u32)) % k;
                T::lit((digit as f64 + j as f64 / d as f64) / k as f64)
            });
            starts.push(Configuration::rotation(&v, cls, maps));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let spread = settings.random_spread;
    for _ in 0..settings.random_starts {
        let v = DVector::from_fn(n, |_, _| T::lit(rng.random::<f64>()));
        let mut c = Configuration::rotation(&v, cls, maps);
        for p in &mut c.points {
            for x in p.iter_mut() {
                *x += T::lit(if spread > 0.0 { rng.random_range(-spread..spread) } else { 0.0 });
            }
        }
        starts.push(c);
    }
    starts
}

/// Multistart deflated Newton over the default grid plus random starts.
///
/// Starts run in parallel batches against a snapshot of the known orbits;
/// new orbits are merged serially in start order, so the result does not
/// depend on the thread count.
pub fn find_critical_points<T: Real>(
    e: &ActionEvaluator<T>,
    settings: &SearchSettings,
) -> Result<(OrbitCountReport, Vec<OrbitRecord<T>>)> {
    let cls = e.class().clone();
    if !cls.is_prime() {
        return Err(Error::NonPrimeClass { m: cls.m.clone(), d: cls.d });
    }
    let starts = multistart_configurations::<T>(&cls, e.maps(), settings);
    let mut records: Vec<OrbitRecord<T>> = Vec::new();
    for batch in starts.chunks(settings.batch.max(1)) {
        let known: Vec<Configuration<T>> = records.iter().map(|r| r.config.clone()).collect();
        let found: Vec<Option<Configuration<T>>> =
            batch.par_iter().map(|s| deflated_newton(e, s, &known, settings)).collect();
        for c in found.into_iter().flatten() {
            let Ok(rec) = certify_record(e, polish(e, c, settings), settings) else { continue };
            // degenerate points are only located to a root of the residual
            let is_new = records.iter().all(|r| {
                let loose = r.morse_index == MorseIndex::Degenerate || rec.morse_index == MorseIndex::Degenerate;
                let tol = if loose { settings.dedup_tol.sqrt() } else { settings.dedup_tol };
                distinct_within(&r.canonical, &rec.canonical, &cls, e.maps(), tol)
            });
            if is_new {
                records.push(rec);
            }
        }
    }
    records.sort_by(|a, b| a.action.partial_cmp(&b.action).unwrap_or(std::cmp::Ordering::Equal));
    let n = cls.dim();
    let mut census = vec![0; e.unknowns() + 1];
    let mut degenerate = 0;
    for r in &records {
        match r.morse_index {
            MorseIndex::Index(k) => census[k] += 1,
            MorseIndex::Degenerate => degenerate += 1,
        }
    }
    while census.len() > n + 1 && census.last() == Some(&0) {
        census.pop();
    }
    let report = OrbitCountReport {
        found: records.len(),
        lower_bound_lyusternik: n + 1,
        lower_bound_morse: 1 << n,
        all_nondegenerate: degenerate == 0 && !records.is_empty(),
        census,
        degenerate,
        starts: starts.len(),
    };
    Ok((report, records))
}

/// Largest per-step mismatch between the recorded phase points and the map
/// chain, including the closing step onto the (m, 0)-translate of the start.
pub fn orbit_step_defect<T: Real>(chain: &MapChain<T>, record: &OrbitRecord<T>) -> Result<T> {
    let maps = chain.maps();
    let mut worst = T::zero();
    for (k, pair) in record.phase_points.windows(2).enumerate() {
        let image = maps[k % maps.len()].forward(&pair[0])?;
        worst = worst.max(image.distance(&pair[1]));
    }
    Ok(worst)
}

/// Distance between F^d of the first point (F the full chain) and its
/// (m, 0)-translate.
pub fn orbit_closure_defect<T: Real>(chain: &MapChain<T>, record: &OrbitRecord<T>) -> Result<T> {
    let start = &record.phase_points[0];
    let mut z = start.clone();
    for _ in 0..record.config.cls.d {
        z = chain.forward(&z)?;
    }
    let target = PhasePoint { q: &start.q + record.config.cls.m_vector::<T>(), p: start.p.clone() };
    Ok(z.distance(&target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfun::{froeschle, integrable_genfun, standard_map, SharedGenFun};
    use crate::twistmap::{compose, TwistMap};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn cls(m: &[i64], d: u32) -> OrbitClass {
        OrbitClass::new(m.to_vec(), d).unwrap()
    }

    fn standard_eval(s: f64) -> ActionEvaluator<f64> {
        ActionEvaluator::new(vec![Arc::new(standard_map(s)) as SharedGenFun<f64>], cls(&[0], 1)).unwrap()
    }

    fn cfg1(q: &[f64], c: &OrbitClass) -> Configuration<f64> {
        Configuration::new(q.iter().map(|&x| DVector::from_element(1, x)).collect(), c.clone(), 1).unwrap()
    }

    #[test]
    fn minimize_standard() {
        let e = standard_eval(0.8);
        let rec = minimize_action(&e, &cfg1(&[0.3], e.class()), &SearchSettings::default()).unwrap();
        assert!((rec.config.points[0][0] - 0.5).abs() < 1e-9);
        assert!((rec.action + 0.8 / (4.0 * PI * PI)).abs() < 1e-14);
        assert!(rec.residual < 1e-10);
        assert_eq!(rec.morse_index, MorseIndex::Index(0));
    }

    #[test]
    fn minimize_integrable_degenerate() {
        let c = cls(&[1], 2);
        let e = ActionEvaluator::new(
            vec![Arc::new(integrable_genfun(DMatrix::identity(1, 1)).unwrap()) as SharedGenFun<f64>],
            c.clone(),
        )
        .unwrap();
        let rec = minimize_action(&e, &cfg1(&[0.1, 0.3], &c), &SearchSettings::default()).unwrap();
        assert!(rec.residual < 1e-10);
        assert!((rec.config.points[1][0] - rec.config.points[0][0] - 0.5).abs() < 1e-10);
        assert_eq!(rec.morse_index, MorseIndex::Degenerate);
    }

    #[test]
    fn minimize_froeschle() {
        let c = cls(&[1, 0], 1);
        let e = ActionEvaluator::new(vec![Arc::new(froeschle(0.1, 0.1, 0.05)) as SharedGenFun<f64>], c.clone()).unwrap();
        let settings = SearchSettings::default();
        let mut best = f64::INFINITY;
        for start in multistart_configurations::<f64>(&c, 1, &SearchSettings { random_starts: 20, ..settings.clone() }) {
            let rec = minimize_action(&e, &start, &settings).unwrap();
            assert!(rec.residual < 1e-10);
            assert!(matches!(rec.morse_index, MorseIndex::Index(0) | MorseIndex::Degenerate));
            best = best.min(rec.action);
        }
        // brute force over a fine grid of rotations bounds the minimum from above
        let mut brute = f64::INFINITY;
        for i in 0..200 {
            for j in 0..200 {
                let v = DVector::from_vec(vec![i as f64 / 200.0, j as f64 / 200.0]);
                brute = brute.min(e.value(&Configuration::rotation(&v, &c, 1)).unwrap());
            }
        }
        assert!(best <= brute + 1e-12);
        assert!(brute - best < 1e-3);
    }

    #[test]
    fn standard_has_exactly_two_orbits() {
        let e = standard_eval(0.8);
        let (report, recs) = find_critical_points(&e, &SearchSettings::default()).unwrap();
        assert_eq!(report.found, 2);
        assert!(report.all_nondegenerate);
        assert_eq!(report.census, vec![1, 1]);
        let min = &recs[0];
        let sad = &recs[1];
        assert!((min.canonical.v[0] - 0.5).abs() < 1e-9 && min.morse_index == MorseIndex::Index(0));
        assert!(sad.canonical.v[0].min(1.0 - sad.canonical.v[0]) < 1e-9 && sad.morse_index == MorseIndex::Index(1));
        assert!(distinct(min, sad));
    }

    fn froeschle_search(k1: f64, k2: f64, lambda: f64) -> (OrbitCountReport, Vec<OrbitRecord<f64>>, MapChain<f64>) {
        let g: SharedGenFun<f64> = Arc::new(froeschle(k1, k2, lambda));
        let e = ActionEvaluator::new(vec![g.clone()], cls(&[1, 0], 1)).unwrap();
        let (report, recs) = find_critical_points(&e, &SearchSettings::default()).unwrap();
        let chain = compose(vec![TwistMap::certify(g, &Default::default()).unwrap()]).unwrap();
        for r in &recs {
            assert!(orbit_closure_defect(&chain, r).unwrap() < 1e-8);
            assert!(orbit_step_defect(&chain, r).unwrap() < 1e-9);
        }
        (report, recs, chain)
    }

    #[test]
    fn froeschle_generic_parameters_give_full_census() {
        let (report, _, _) = froeschle_search(0.3, 0.2, 0.1);
        assert_eq!(report.found, 4);
        assert!(report.all_nondegenerate);
        assert_eq!(report.census, vec![1, 2, 1]);
        assert!(report.census_respects_binomials(2));
    }

    #[test]
    fn froeschle_at_bifurcation_value() {
        // lambda = K/2 makes the minimum at (1/2, 1/2) degenerate (quartic along (1,1))
        let (report, recs, _) = froeschle_search(0.1, 0.1, 0.05);
        assert!(report.found >= 3);
        assert_eq!(report.found, 4);
        assert!(!report.all_nondegenerate);
        assert_eq!(report.degenerate, 1);
        let min = &recs[0];
        assert_eq!(min.morse_index, MorseIndex::Degenerate);
        assert!((min.canonical.v[0] - 0.5).abs() < 1e-3 && (min.canonical.v[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn integrable_family_flagged_degenerate() {
        let c = cls(&[1], 3);
        let e = ActionEvaluator::new(
            vec![Arc::new(integrable_genfun(DMatrix::identity(1, 1)).unwrap()) as SharedGenFun<f64>],
            c,
        )
        .unwrap();
        let settings = SearchSettings { random_starts: 10, ..Default::default() };
        let (report, recs) = find_critical_points(&e, &settings).unwrap();
        assert!(report.found >= 1);
        assert!(!report.all_nondegenerate);
        assert!(recs.iter().all(|r| r.morse_index == MorseIndex::Degenerate));
    }

    #[test]
    fn non_prime_refused() {
        let e = ActionEvaluator::new(vec![Arc::new(standard_map(0.5)) as SharedGenFun<f64>], cls(&[0], 2)).unwrap();
        assert!(matches!(find_critical_points(&e, &SearchSettings::default()), Err(Error::NonPrimeClass { .. })));
    }

    #[test]
    fn morse_examples() {
        let e = standard_eval(1.0);
        assert_eq!(morse_index(&e, &cfg1(&[0.0], e.class()), 1e-7, 1e-10).unwrap(), MorseIndex::Index(1));
        assert_eq!(morse_index(&e, &cfg1(&[0.5], e.class()), 1e-7, 1e-10).unwrap(), MorseIndex::Index(0));
        assert!(matches!(morse_index(&e, &cfg1(&[0.25], e.class()), 1e-7, 1e-10), Err(Error::NotCritical { .. })));
        let c = cls(&[1], 2);
        let ei = ActionEvaluator::new(
            vec![Arc::new(integrable_genfun(DMatrix::identity(1, 1)).unwrap()) as SharedGenFun<f64>],
            c.clone(),
        )
        .unwrap();
        assert_eq!(morse_index(&ei, &cfg1(&[0.0, 0.5], &c), 1e-7, 1e-10).unwrap(), MorseIndex::Degenerate);
    }

    #[test]
    fn distinct_modulo_tau_and_sigma() {
        let c = cls(&[1, 0], 3);
        let chain: Vec<SharedGenFun<f64>> = vec![Arc::new(froeschle(0.1, 0.1, 0.05))];
        let e = ActionEvaluator::new(chain, c).unwrap();
        let settings = SearchSettings { random_starts: 20, ..Default::default() };
        let (_, recs) = find_critical_points(&e, &settings).unwrap();
        let r = &recs[0];
        for (j, shift) in [(0, [2, -1]), (1, [0, 0]), (2, [-3, 5])] {
            let moved = r.config.shift(j).translate(&shift);
            let other = certify_record(&e, moved, &settings).unwrap();
            assert!(!distinct(r, &other));
            assert_eq!(other.morse_index, r.morse_index);
        }
        for pair in recs.windows(2) {
            assert!(distinct(&pair[0], &pair[1]));
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let c = cls(&[1, 0], 1);
        let e = ActionEvaluator::new(vec![Arc::new(froeschle(0.3, 0.2, 0.1)) as SharedGenFun<f64>], c).unwrap();
        let settings = SearchSettings { random_starts: 40, ..Default::default() };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| find_critical_points(&e, &settings).unwrap())
        };
        let (ra, a) = run(1);
        let (rb, b) = run(4);
        assert_eq!(ra, rb);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.config, y.config);
        }
    }
}
