//! The four pipelines: check, orbits, decompose, suspend.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use symtwist::action::ActionEvaluator;
use symtwist::genfun::{certify_convexity, fd_derivative_check, lower_bound_cert, periodicity_defect, SamplingSpec, SharedGenFun};
use symtwist::hamflow::{
    self, choose_n, decompose, default_p_max, estimate_optical_bounds, flow, gronwall_check, tangent_flow, twist_block,
    verify_md_point, OpticalSampling, SharedHamiltonian,
};
use symtwist::orbits::{find_critical_points, orbit_closure_defect, orbit_step_defect, MorseIndex, OrbitCountReport, OrbitRecord};
use symtwist::suspension::{family_genfun, verify_suspension, SuspensionFamily};
use symtwist::torus::{OrbitClass, PhasePoint};
use symtwist::twistmap::{check_symplectic, compose, MapChain, TwistMap};

use crate::config::{HamiltonianSpec, RunConfig, SystemSpec};
use crate::report::{PipelineOutput, Table};
use crate::{core_witness, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Check,
    Orbits,
    Decompose,
    Suspend,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Orbits => "orbits",
            Command::Decompose => "decompose",
            Command::Suspend => "suspend",
        }
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<PipelineOutput, CliError> {
    cfg.validate()?;
    match cmd {
        Command::Check => match &cfg.system {
            SystemSpec::Hamiltonian(h) => check_hamiltonian(cfg, h),
            _ => check_maps(cfg),
        },
        Command::Orbits => orbits(cfg),
        Command::Decompose => decompose_pipeline(cfg),
        Command::Suspend => suspend(cfg),
    }
}

#[derive(Debug, Clone, Serialize)]
struct CheckItem {
    name: String,
    passed: bool,
    value: f64,
    threshold: f64,
    #[serde(skip_serializing_if = "Value::is_null")]
    witness: Value,
}

#[derive(Default)]
struct Checks(Vec<CheckItem>);

impl Checks {
    /// Records `value <= threshold`.
    fn at_most(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.0.push(CheckItem { name: name.into(), passed: value <= threshold, value, threshold, witness: Value::Null });
    }

    fn failed(&mut self, name: impl Into<String>, err: &symtwist::Error) {
        let mut witness = core_witness(err);
        if witness.is_null() {
            witness = json!({ "error": err.to_string() });
        }
        self.0.push(CheckItem { name: name.into(), passed: false, value: f64::NAN, threshold: f64::NAN, witness });
    }

    fn passed(&self) -> bool {
        self.0.iter().all(|c| c.passed)
    }

    fn first_failure(&self) -> Option<String> {
        self.0.iter().find(|c| !c.passed).map(|c| c.name.clone())
    }

    fn first_witness(&self) -> Value {
        self.0.iter().find(|c| !c.passed).map(|c| c.witness.clone()).unwrap_or(Value::Null)
    }
}

fn map_genfuns(cfg: &RunConfig, cmd: Command) -> Result<Vec<SharedGenFun<f64>>, CliError> {
    match &cfg.system {
        SystemSpec::Map(m) => Ok(vec![m.build()?]),
        SystemSpec::Chain(maps) => maps.iter().map(|m| m.build()).collect(),
        SystemSpec::Hamiltonian(_) => Err(CliError::Config(format!("'{}' needs a map or chain system", cmd.name()))),
    }
}

fn classes_or_default(cfg: &RunConfig) -> Result<Vec<OrbitClass>, CliError> {
    let mut classes = cfg.orbit_classes()?;
    if classes.is_empty() {
        classes.push(OrbitClass::new(vec![0; cfg.system_dim()?], 1)?);
    }
    Ok(classes)
}

fn optical_sampling(cfg: &RunConfig, classes: &[OrbitClass]) -> OpticalSampling {
    cfg.optical.unwrap_or(OpticalSampling { p_max: default_p_max(classes), ..OpticalSampling::default() })
}

fn random_phase_point(rng: &mut ChaCha8Rng, n: usize, p_max: f64) -> PhasePoint<f64> {
    PhasePoint {
        q: DVector::from_fn(n, |_, _| rng.random::<f64>()),
        p: DVector::from_fn(n, |_, _| rng.random_range(-p_max..=p_max)),
    }
}

fn vec_f64(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn check_maps(cfg: &RunConfig) -> Result<PipelineOutput, CliError> {
    let gens = map_genfuns(cfg, Command::Check)?;
    let cs = &cfg.checks;
    let tol = &cfg.tolerances;
    let mut checks = Checks::default();
    let mut maps_doc = Vec::new();
    for (k, g) in gens.iter().enumerate() {
        let tag = |what: &str| format!("map[{k}].{what}");
        checks.at_most(tag("periodicity"), periodicity_defect(g.as_ref(), cs.periodicity_samples, cfg.seed), tol.periodicity);
        let fd = fd_derivative_check(g.as_ref(), cs.fd_samples, cs.fd_step, cfg.seed);
        checks.at_most(tag("derivatives"), fd.max_error(), tol.fd);
        let mut doc = json!({ "label": g.label(), "derivatives": fd });
        let tc = match certify_convexity(g.as_ref(), &cfg.sampling) {
            Ok(tc) => tc,
            Err(e @ symtwist::Error::ConvexityViolation { .. }) => {
                checks.failed(tag("convexity"), &e);
                maps_doc.push(doc);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        checks.0.push(CheckItem { name: tag("convexity"), passed: tc.a > 0.0, value: tc.a, threshold: 0.0, witness: Value::Null });
        doc["constants"] = json!(tc);
        match lower_bound_cert(g.as_ref(), &tc, &cfg.sampling) {
            Ok(cert) => {
                checks.0.push(CheckItem {
                    name: tag("lower_bound"),
                    passed: true,
                    value: cert.verified_samples as f64,
                    threshold: cfg.sampling.random as f64,
                    witness: Value::Null,
                });
                doc["lower_bound"] = json!(cert);
            }
            Err(e @ symtwist::Error::BoundViolation { .. }) => checks.failed(tag("lower_bound"), &e),
            Err(e) => return Err(e.into()),
        }
        let map = TwistMap::new(g.clone(), tc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ k as u64);
        let (mut sym, mut round_trip) = (0.0f64, 0.0f64);
        for _ in 0..cs.symplectic_samples {
            let z = random_phase_point(&mut rng, g.dim(), 1.0);
            sym = sym.max(check_symplectic(&map.tangent(&z)?)?);
            round_trip = round_trip.max(map.inverse(&map.forward(&z)?)?.distance(&z));
        }
        checks.at_most(tag("symplectic"), sym, tol.symplectic);
        checks.at_most(tag("round_trip"), round_trip, tol.symplectic);
        maps_doc.push(doc);
    }
    Ok(PipelineOutput {
        command: Command::Check,
        passed: checks.passed(),
        failure: checks.first_failure(),
        witness: checks.first_witness(),
        body: json!({ "maps": maps_doc, "checks": checks.0 }),
        tables: Vec::new(),
    })
}

fn check_hamiltonian(cfg: &RunConfig, spec: &HamiltonianSpec) -> Result<PipelineOutput, CliError> {
    let hm = spec.build()?;
    let n = hm.dim();
    let classes = classes_or_default(cfg)?;
    let sampling = optical_sampling(cfg, &classes);
    let cs = &cfg.checks;
    let tol = &cfg.tolerances;
    let mut checks = Checks::default();
    checks.at_most(
        "periodicity",
        hamflow::periodicity_defect(hm.as_ref(), cs.periodicity_samples, sampling.p_max, cfg.seed),
        tol.periodicity,
    );
    let bounds = match estimate_optical_bounds(hm.as_ref(), &sampling) {
        Ok(b) => b,
        Err(e @ symtwist::Error::NotOptical(_)) => {
            checks.failed("optical", &e);
            return Ok(PipelineOutput {
                command: Command::Check,
                passed: false,
                failure: checks.first_failure(),
                witness: checks.first_witness(),
                body: json!({ "label": hm.label(), "checks": checks.0 }),
                tables: Vec::new(),
            });
        }
        Err(e) => return Err(e.into()),
    };
    checks.0.push(CheckItem { name: "optical".into(), passed: true, value: bounds.c, threshold: 0.0, witness: Value::Null });
    let n_steps = choose_n(&bounds, cfg.decompose.safety)?;
    let eps = 1.0 / n_steps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut sym, mut gronwall, mut window_misses) = (0.0f64, 0.0f64, 0usize);
    let mut blocks = Vec::new();
    for _ in 0..cs.flow_points {
        let z = random_phase_point(&mut rng, n, sampling.p_max);
        sym = sym.max(tangent_flow(hm.as_ref(), &z, 0.0, 1.0, cs.flow_steps)?.symplecticity_residual());
        match gronwall_check(hm.as_ref(), &z, 0.0, 1.0, bounds.k, cs.flow_steps) {
            Ok(r) => gronwall = gronwall.max(r.max_ratio),
            Err(e @ symtwist::Error::BoundViolation { .. }) => checks.failed("gronwall", &e),
            Err(e) => return Err(e.into()),
        }
        let t0 = rng.random_range(0.0..1.0 - eps);
        let tb = twist_block(hm.as_ref(), &z, t0, eps, &bounds, (cs.flow_steps / n_steps).max(16))?;
        window_misses += usize::from(!tb.within_window);
        blocks.push(tb);
    }
    checks.at_most("tangent_symplectic", sym, tol.symplectic);
    checks.at_most("gronwall", gronwall, 1.0);
    checks.at_most("twist_window", window_misses as f64, 0.0);
    Ok(PipelineOutput {
        command: Command::Check,
        passed: checks.passed(),
        failure: checks.first_failure(),
        witness: checks.first_witness(),
        body: json!({
            "label": hm.label(),
            "bounds": bounds,
            "n_steps": n_steps,
            "epsilon": eps,
            "twist_blocks": blocks,
            "checks": checks.0,
        }),
        tables: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct OrbitDoc {
    index: usize,
    action: f64,
    residual: f64,
    morse_index: MorseIndex,
    hessian_min_abs_eig: f64,
    /// Mean of the configuration, reduced mod 1.
    mean_q: Vec<f64>,
    start_q: Vec<f64>,
    start_p: Vec<f64>,
    step_defect: f64,
    closure_defect: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow_residual: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct ClassDoc {
    m: Vec<i64>,
    d: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<OrbitCountReport>,
    orbits: Vec<OrbitDoc>,
    /// Critical points found but not emitted because a verification failed.
    rejected: usize,
}

fn class_stem(cls: &OrbitClass) -> String {
    let m: Vec<String> = cls.m.iter().map(|x| x.to_string()).collect();
    format!("orbits_m{}_d{}", m.join("_"), cls.d)
}

/// Searches every class on the chain; orbits failing a verification are
/// counted but not emitted.
fn search_classes(
    cfg: &RunConfig,
    gens: &[SharedGenFun<f64>],
    chain: &MapChain<f64>,
    classes: &[OrbitClass],
    flow_check: Option<&dyn Fn(&OrbitRecord<f64>, &OrbitClass) -> Result<f64, CliError>>,
) -> Result<(Vec<ClassDoc>, Vec<Table>), CliError> {
    let tol = &cfg.tolerances;
    let n = chain.dim();
    let mut docs = Vec::new();
    let mut tables = Vec::new();
    for cls in classes {
        let mut doc = ClassDoc { m: cls.m.clone(), d: cls.d, skipped: None, report: None, orbits: Vec::new(), rejected: 0 };
        if !cls.is_prime() {
            doc.skipped = Some(format!("class (m={:?}, d={}) is not prime", cls.m, cls.d));
            docs.push(doc);
            continue;
        }
        let e = ActionEvaluator::new(gens.to_vec(), cls.clone())?;
        let (report, records) = find_critical_points(&e, &cfg.search)?;
        let mut header = vec!["orbit".to_string(), "k".to_string()];
        header.extend((1..=n).map(|i| format!("q{i}")));
        header.extend((1..=n).map(|i| format!("p{i}")));
        let mut table = Table { name: class_stem(cls), header, rows: Vec::new() };
        for rec in &records {
            let step_defect = orbit_step_defect(chain, rec)?;
            let closure_defect = orbit_closure_defect(chain, rec)?;
            let flow_residual = flow_check.map(|f| f(rec, cls)).transpose()?;
            let verified =
                step_defect < tol.orbit && closure_defect < tol.orbit && flow_residual.is_none_or(|r| r < tol.verify);
            if !verified {
                doc.rejected += 1;
                continue;
            }
            let index = doc.orbits.len();
            for (k, z) in rec.phase_points.iter().enumerate() {
                let mut row = vec![index as f64, k as f64];
                row.extend(z.q.iter().chain(z.p.iter()));
                table.rows.push(row);
            }
            let start = &rec.phase_points[0];
            doc.orbits.push(OrbitDoc {
                index,
                action: rec.action,
                residual: rec.residual,
                morse_index: rec.morse_index,
                hessian_min_abs_eig: rec.hessian_min_abs_eig,
                mean_q: vec_f64(&rec.canonical.v),
                start_q: vec_f64(&start.q),
                start_p: vec_f64(&start.p),
                step_defect,
                closure_defect,
                flow_residual,
            });
        }
        doc.report = Some(report);
        docs.push(doc);
        tables.push(table);
    }
    Ok((docs, tables))
}

fn orbits(cfg: &RunConfig) -> Result<PipelineOutput, CliError> {
    let gens = map_genfuns(cfg, Command::Orbits)?;
    let maps = gens.iter().map(|g| TwistMap::certify(g.clone(), &cfg.sampling)).collect::<Result<Vec<_>, _>>()?;
    let constants: Vec<_> = maps.iter().map(|m| m.constants().clone()).collect();
    let chain = compose(maps)?;
    let classes = classes_or_default(cfg)?;
    let (docs, tables) = search_classes(cfg, &gens, &chain, &classes, None)?;
    let rejected: usize = docs.iter().map(|d| d.rejected).sum();
    Ok(PipelineOutput {
        command: Command::Orbits,
        passed: rejected == 0,
        failure: (rejected > 0).then(|| format!("{rejected} critical point(s) failed orbit verification")),
        witness: Value::Null,
        body: json!({ "labels": gens.iter().map(|g| g.label()).collect::<Vec<_>>(), "constants": constants, "classes": docs }),
        tables,
    })
}

fn decompose_pipeline(cfg: &RunConfig) -> Result<PipelineOutput, CliError> {
    let SystemSpec::Hamiltonian(spec) = &cfg.system else {
        return Err(CliError::Config("'decompose' needs a hamiltonian system".into()));
    };
    let hm: SharedHamiltonian<f64> = spec.build()?;
    let n = hm.dim();
    let classes = classes_or_default(cfg)?;
    let sampling = optical_sampling(cfg, &classes);
    let tol = &cfg.tolerances;
    let bounds = estimate_optical_bounds(hm.as_ref(), &sampling)?;
    let periodicity = hamflow::periodicity_defect(hm.as_ref(), cfg.checks.periodicity_samples, sampling.p_max, cfg.seed);
    if !(periodicity <= tol.periodicity) {
        return Err(CliError::Certification {
            message: format!("Hamiltonian is not 1-periodic in q (defect {periodicity:e})"),
            witness: json!({ "periodicity_defect": periodicity }),
        });
    }
    let plan = decompose(hm.clone(), &bounds, &cfg.decompose)?;
    let chain = plan.chain()?;
    let direct_steps = cfg.decompose.shooting.steps * plan.n_steps;
    let eps = 1.0 / plan.n_steps as f64;
    let steps: Vec<Value> = plan
        .maps
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let c = m.constants();
            json!({ "step": k, "t0": k as f64 * eps, "t1": (k + 1) as f64 * eps, "a": c.a, "kprime": c.kprime, "samples": c.sample_count })
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut composition = 0.0f64;
    for _ in 0..cfg.checks.composition_samples {
        let z = random_phase_point(&mut rng, n, 0.5 * sampling.p_max);
        let direct = flow(hm.as_ref(), &z, 0.0, 1.0, direct_steps)?;
        composition = composition.max(chain.forward(&z)?.distance(&direct));
    }

    let hm_ref = hm.as_ref();
    let flow_check = |rec: &OrbitRecord<f64>, cls: &OrbitClass| -> Result<f64, CliError> {
        Ok(verify_md_point(hm_ref, &rec.phase_points[0], cls, direct_steps)?)
    };
    let (docs, tables) = search_classes(cfg, &plan.generating_functions(), &chain, &classes, Some(&flow_check))?;
    let rejected: usize = docs.iter().map(|d| d.rejected).sum();
    let failure = if !(composition <= tol.composition) {
        Some(format!("composition residual {composition:e} exceeds {:e}", tol.composition))
    } else if rejected > 0 {
        Some(format!("{rejected} critical point(s) failed orbit verification"))
    } else {
        None
    };
    Ok(PipelineOutput {
        command: Command::Decompose,
        passed: failure.is_none(),
        failure,
        witness: Value::Null,
        body: json!({
            "label": hm.label(),
            "bounds": bounds,
            "n_steps": plan.n_steps,
            "steps": steps,
            "composition_residual": composition,
            "composition_samples": cfg.checks.composition_samples,
            "classes": docs,
        }),
        tables,
    })
}

fn suspend(cfg: &RunConfig) -> Result<PipelineOutput, CliError> {
    let gens = map_genfuns(cfg, Command::Suspend)?;
    let [g] = gens.as_slice() else {
        return Err(CliError::Config("'suspend' needs a single map".into()));
    };
    // refuse uncertified targets before integrating anything
    let target = TwistMap::certify(g.clone(), &cfg.sampling)?;
    let s = &cfg.suspend;
    let fam = SuspensionFamily::new(&target)?.with_stencil(s.stencil);
    let n = fam.dim();
    let a = target.constants().a;

    let audit_spec = SamplingSpec { per_axis: s.audit_per_axis, random: s.audit_random, ..cfg.sampling };
    let mut audit = Vec::new();
    let mut audit_ok = true;
    for &t in &s.audit_times {
        let a_t = certify_convexity(&family_genfun(&fam, t)?, &audit_spec)?.a;
        let ok = a_t >= a * (1.0 - 1e-9);
        audit_ok &= ok;
        audit.push(json!({ "t": t, "a": a_t, "passed": ok }));
    }

    let mut grid = Vec::new();
    for i in 0..s.grid_q {
        for j in 0..s.grid_p {
            let p = if s.grid_p == 1 { 0.0 } else { -s.p_range + 2.0 * s.p_range * j as f64 / (s.grid_p - 1) as f64 };
            grid.push(PhasePoint { q: DVector::from_element(n, i as f64 / s.grid_q as f64), p: DVector::from_element(n, p) });
        }
    }
    let rep = verify_suspension(&fam, &target, &grid, s.steps)?;
    let mut header = vec!["index".to_string()];
    header.extend((1..=n).map(|i| format!("q{i}")));
    header.extend((1..=n).map(|i| format!("p{i}")));
    header.push("error".into());
    let rows = grid
        .iter()
        .zip(&rep.errors)
        .enumerate()
        .map(|(k, (z, e))| {
            let mut row = vec![k as f64];
            row.extend(z.q.iter().chain(z.p.iter()));
            row.push(*e);
            row
        })
        .collect();
    let failure = if !(rep.max_error <= cfg.tolerances.suspension) {
        Some(format!("round-trip error {:e} exceeds {:e}", rep.max_error, cfg.tolerances.suspension))
    } else if !audit_ok {
        Some("convexity of S_t fell below the target margin".into())
    } else {
        None
    };
    Ok(PipelineOutput {
        command: Command::Suspend,
        passed: failure.is_none(),
        failure,
        witness: Value::Null,
        body: json!({
            "label": g.label(),
            "a": a,
            "stencil": s.stencil,
            "steps": rep.steps,
            "max_error": rep.max_error,
            "convexity_audit": audit,
        }),
        tables: vec![Table { name: "suspend_errors".into(), header, rows }],
    })
}
