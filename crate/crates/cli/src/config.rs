//! Run configuration: JSON documents validated before any computation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use symtwist::genfun::{froeschle, integrable_genfun, standard_genfun, standard_map, CosineSeries, SamplingSpec, SharedGenFun};
use symtwist::hamflow::{free_particle, pendulum, DecomposeSettings, OpticalSampling, SharedHamiltonian};
use symtwist::hamlang::ExprHamiltonian;
use symtwist::orbits::SearchSettings;
use symtwist::suspension::StencilConfig;
use symtwist::torus::OrbitClass;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub system: SystemSpec,
    #[serde(default)]
    pub classes: Vec<ClassSpec>,
    /// Master seed; the search, sampling and decomposition seeds are set from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub search: SearchSettings,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub optical: Option<OpticalSampling>,
    #[serde(default)]
    pub decompose: DecomposeSettings,
    #[serde(default)]
    pub suspend: SuspendSettings,
    #[serde(default)]
    pub checks: CheckSettings,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Map(MapSpec),
    Chain(Vec<MapSpec>),
    Hamiltonian(HamiltonianSpec),
}

/// S(q, Q) = 1/2 <A (Q - q), Q - q> + V(q) with a cosine-series V.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    Standard { s: f64 },
    Froeschle { k1: f64, k2: f64, lambda: f64 },
    Integrable { matrix: Vec<Vec<f64>> },
    Quadratic {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        potential: Vec<CosineTerm>,
    },
}

/// amplitude / (4 pi^2) cos(2 pi <k, q>).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineTerm {
    pub amplitude: f64,
    pub k: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// 1/2 |p|^2.
    Free { n: usize },
    /// 1/2 p^2 + s / (4 pi^2) cos(2 pi q).
    Pendulum { s: f64 },
    Expression { text: String, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub m: Vec<i64>,
    pub d: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Largest |S(q + m, Q + m) - S(q, Q)| or |H(q + e_i) - H(q)|.
    pub periodicity: f64,
    /// Relative error of analytic derivatives against central differences.
    pub fd: f64,
    pub symplectic: f64,
    /// Per-step mismatch and deck-translation closure of emitted orbits.
    pub orbit: f64,
    /// Direct-flow residual of orbits found on a decomposition.
    pub verify: f64,
    /// Chain composition against the direct time-1 flow.
    pub composition: f64,
    /// Largest round-trip error accepted from the suspension.
    pub suspension: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { periodicity: 1e-10, fd: 1e-6, symplectic: 1e-8, orbit: 1e-8, verify: 1e-6, composition: 1e-8, suspension: 1e-3 }
    }
}

impl Tolerances {
    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("tolerance override '{assignment}' is not key=value")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("tolerance '{key}' needs a number, got '{value}'")))?;
        if !(value > 0.0 && value.is_finite()) {
            return Err(CliError::Config(format!("tolerance '{key}' must be positive and finite")));
        }
        let slot = match key.trim() {
            "periodicity" => &mut self.periodicity,
            "fd" => &mut self.fd,
            "symplectic" => &mut self.symplectic,
            "orbit" => &mut self.orbit,
            "verify" => &mut self.verify,
            "composition" => &mut self.composition,
            "suspension" => &mut self.suspension,
            other => return Err(CliError::Config(format!("unknown tolerance '{other}'"))),
        };
        *slot = value;
        Ok(())
    }
}

/// Sample counts for the `check` pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSettings {
    pub periodicity_samples: usize,
    pub fd_samples: usize,
    pub fd_step: f64,
    pub symplectic_samples: usize,
    /// Phase points for the tangent-flow checks of a Hamiltonian.
    pub flow_points: usize,
    pub flow_steps: usize,
    /// Points at which a decomposition is compared with the direct flow.
    pub composition_samples: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { periodicity_samples: 1000, fd_samples: 100, fd_step: 1e-5, symplectic_samples: 50, flow_points: 20, flow_steps: 256, composition_samples: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuspendSettings {
    /// Grid over [0, 1) x [-p_range, p_range].
    pub grid_q: usize,
    pub grid_p: usize,
    pub p_range: f64,
    pub steps: usize,
    pub stencil: StencilConfig,
    /// Times at which the convexity of S_t is re-measured.
    pub audit_times: Vec<f64>,
    pub audit_per_axis: usize,
    pub audit_random: usize,
}

impl Default for SuspendSettings {
    fn default() -> Self {
        Self {
            grid_q: 4,
            grid_p: 3,
            p_range: 0.6,
            steps: 200,
            stencil: StencilConfig::default(),
            audit_times: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            audit_per_axis: 16,
            audit_random: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("schema error: {e}")))?;
        cfg.validate()?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Propagates the master seed into the sub-settings.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.search.seed = seed;
        self.sampling.seed = seed ^ 0x7157;
        self.decompose.seed = seed ^ 0x5eed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let n = self.system_dim()?;
        for c in &self.classes {
            if c.m.len() != n {
                return bad(format!("class m={:?} has dimension {}, system has {n}", c.m, c.m.len()));
            }
            if c.d == 0 {
                return bad(format!("class m={:?} needs d >= 1", c.m));
            }
        }
        let s = &self.suspend;
        if s.grid_q == 0 || s.grid_p == 0 || s.steps == 0 || !(s.p_range >= 0.0) {
            return bad("suspend grid, steps and p_range must be positive".into());
        }
        if s.audit_times.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("suspend audit_times must lie in (0, 1]".into());
        }
        if self.search.batch == 0 || self.search.tol <= 0.0 {
            return bad("search batch and tol must be positive".into());
        }
        Ok(())
    }

    pub fn system_dim(&self) -> Result<usize, CliError> {
        match &self.system {
            SystemSpec::Map(m) => m.dim(),
            SystemSpec::Chain(maps) => {
                let first = maps.first().ok_or_else(|| CliError::Config("chain needs at least one map".into()))?.dim()?;
                for m in maps {
                    if m.dim()? != first {
                        return Err(CliError::Config("all maps of a chain need the same dimension".into()));
                    }
                }
                Ok(first)
            }
            SystemSpec::Hamiltonian(h) => h.dim(),
        }
    }

    pub fn orbit_classes(&self) -> Result<Vec<OrbitClass>, CliError> {
        self.classes
            .iter()
            .map(|c| OrbitClass::new(c.m.clone(), c.d).map_err(|e| CliError::Config(e.to_string())))
            .collect()
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config("matrix must be square and non-empty".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl MapSpec {
    pub fn dim(&self) -> Result<usize, CliError> {
        Ok(match self {
            MapSpec::Standard { .. } => 1,
            MapSpec::Froeschle { .. } => 2,
            MapSpec::Integrable { matrix: m } | MapSpec::Quadratic { matrix: m, .. } => matrix(m)?.nrows(),
        })
    }

    pub fn build(&self) -> Result<SharedGenFun<f64>, CliError> {
        let cfg = |e: symtwist::Error| CliError::Config(e.to_string());
        Ok(match self {
            MapSpec::Standard { s } => Arc::new(standard_map(*s)),
            MapSpec::Froeschle { k1, k2, lambda } => Arc::new(froeschle(*k1, *k2, *lambda)),
            MapSpec::Integrable { matrix: m } => Arc::new(integrable_genfun(matrix(m)?).map_err(cfg)?),
            MapSpec::Quadratic { matrix: m, potential } => {
                let a = matrix(m)?;
                let terms = potential.iter().map(|t| (t.amplitude, t.k.clone())).collect();
                let v = CosineSeries::new(a.nrows(), terms).map_err(cfg)?;
                Arc::new(standard_genfun(a, Arc::new(v)).map_err(cfg)?.with_label("quadratic"))
            }
        })
    }
}

impl HamiltonianSpec {
    pub fn dim(&self) -> Result<usize, CliError> {
        match self {
            HamiltonianSpec::Free { n } | HamiltonianSpec::Expression { n, .. } if *n == 0 => {
                Err(CliError::Config("Hamiltonian dimension n must be >= 1".into()))
            }
            HamiltonianSpec::Free { n } | HamiltonianSpec::Expression { n, .. } => Ok(*n),
            HamiltonianSpec::Pendulum { .. } => Ok(1),
        }
    }

    pub fn build(&self) -> Result<SharedHamiltonian<f64>, CliError> {
        Ok(match self {
            HamiltonianSpec::Free { n } => Arc::new(free_particle(*n)),
            HamiltonianSpec::Pendulum { s } => Arc::new(pendulum(*s)),
            HamiltonianSpec::Expression { text, n } => {
                Arc::new(ExprHamiltonian::new(text, *n).map_err(|e| CliError::Config(e.to_string()))?)
            }
        })
    }
}
