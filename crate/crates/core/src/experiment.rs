//! Seeded experiment batches.
//!
//! An [`ExperimentConfig`] expands into config points (graph × κ_f target);
//! every point is run for every seed. Each (point, seed) builds its own
//! [`Instance`] from independent random substreams and yields one or more
//! [`ResultRow`]s. Units run on the rayon pool and are gathered back in
//! (point, seed) order, so output bytes depend only on the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::admm::{self, AdmmConfig, AdmmError, Certificate, Problem, ReferenceSolution};
use crate::dgd::{self, DgdError};
use crate::objectives::{ObjectiveError, ObjectiveProfile, ObjectiveSet, QuadraticLocal};
use crate::rates::{self, RateBundle, RateError, RateReport};
use crate::seeding::{self, Stream};
use crate::spectral::{self, GraphSpectra, IncidenceSet, SpectralError};
use crate::topology::{self, NetworkMetrics, Topology, TopologyError, TopologyKind};

pub const KAPPA_G_BINS: usize = 20;
pub const RATE_BOUND_SLACK: f64 = 1e-6;
pub const MIN_GRID_POINTS: usize = 20;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Dgd(#[from] DgdError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, ExperimentError::Admm(e) if e.is_invariant_violation())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LinearConvergence,
    CSweep,
    ThetaSweep,
    KappaFSweep,
    TopologyStudy,
    BipartiteStudy,
    DgdCompare,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::LinearConvergence => "linear_convergence",
            ExperimentKind::CSweep => "c_sweep",
            ExperimentKind::ThetaSweep => "theta_sweep",
            ExperimentKind::KappaFSweep => "kappa_f_sweep",
            ExperimentKind::TopologyStudy => "topology_study",
            ExperimentKind::BipartiteStudy => "bipartite_study",
            ExperimentKind::DgdCompare => "dgd_compare",
        }
    }
}

/// Connectivity ratio: a fixed list (one point each) or one uniform draw per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatioSpec {
    Fixed(Vec<f64>),
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    Random { p: RatioSpec },
    Special { kinds: Vec<TopologyKind> },
    Grid { dims: Vec<[usize; 3]> },
    Bipartite { imbalance: Vec<usize>, p: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum CPolicy {
    #[default]
    CT,
    Theta {
        values: Vec<f64>,
    },
    Explicit {
        values: Vec<f64>,
    },
    /// Log grid on `[c_t·lower, c_t·upper]`.
    Grid {
        points: usize,
        #[serde(default = "default_grid_lower")]
        lower: f64,
        #[serde(default = "default_grid_upper")]
        upper: f64,
    },
}

fn default_grid_lower() -> f64 {
    1e-3
}

fn default_grid_upper() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl Seeds {
    pub fn values(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { start, count } => (*start..start + count).collect(),
        }
    }
}

fn default_dim() -> usize {
    3
}
fn default_max_iter() -> usize {
    admm::DEFAULT_MAX_ITER
}
fn default_tol() -> f64 {
    admm::DEFAULT_TOL
}
fn default_floor_rel() -> f64 {
    admm::DEFAULT_FLOOR_REL
}
fn default_noise() -> f64 {
    crate::objectives::DEFAULT_NOISE_VARIANCE
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub agents: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub topology: TopologySpec,
    /// Empty: keep the generated measurement matrices as drawn.
    #[serde(default)]
    pub kappa_f: Vec<f64>,
    #[serde(default)]
    pub c: CPolicy,
    pub seeds: Seeds,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_floor_rel")]
    pub floor_rel: f64,
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default)]
    pub check_contraction: bool,
    #[serde(default = "default_true")]
    pub write_trajectories: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::List(vec![seed]);
        self
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.values().is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if !(self.tol >= 0.0) || !(self.floor_rel >= 0.0) {
            return bad("tol and floor_rel must be non-negative".into());
        }
        if !(self.noise_variance >= 0.0) {
            return bad(format!(
                "noise_variance {} must be non-negative",
                self.noise_variance
            ));
        }
        if let Some(k) = self.kappa_f.iter().find(|k| !(**k >= 1.0)) {
            return bad(format!("kappa_f target {k} must be at least 1"));
        }
        match &self.topology {
            TopologySpec::Random {
                p: RatioSpec::Fixed(ps),
            } => {
                if ps.is_empty() {
                    return bad("random topology needs at least one ratio".into());
                }
                for &p in ps {
                    if !(p > 0.0 && p <= 1.0) {
                        return bad(format!("ratio {p} outside (0, 1]"));
                    }
                }
            }
            TopologySpec::Random {
                p: RatioSpec::Uniform { low, high },
            } => {
                if !(*low > 0.0 && low <= high && *high <= 1.0) {
                    return bad(format!(
                        "uniform ratio range [{low}, {high}] must lie in (0, 1]"
                    ));
                }
            }
            TopologySpec::Special { kinds } => {
                if kinds.is_empty() {
                    return bad("special topology needs at least one kind".into());
                }
                if let Some(k) = kinds.iter().find(|k| {
                    matches!(
                        k,
                        TopologyKind::Random | TopologyKind::Grid3d | TopologyKind::Bipartite
                    )
                }) {
                    return bad(format!("`{k}` is not a special topology"));
                }
            }
            TopologySpec::Grid { dims } => {
                if let Some(d) = dims.iter().find(|d| d[0] * d[1] * d[2] != self.agents) {
                    return bad(format!("grid {d:?} does not have {} agents", self.agents));
                }
                if dims.is_empty() {
                    return bad("grid topology needs at least one shape".into());
                }
            }
            TopologySpec::Bipartite { imbalance, p } => {
                if imbalance.is_empty() {
                    return bad("bipartite topology needs at least one imbalance".into());
                }
                if !(*p > 0.0 && *p <= 1.0) {
                    return bad(format!("ratio {p} outside (0, 1]"));
                }
            }
        }
        match &self.c {
            CPolicy::CT => {}
            CPolicy::Theta { values } | CPolicy::Explicit { values } => {
                if values.is_empty() || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return bad("c values must be a non-empty list of positive numbers".into());
                }
            }
            CPolicy::Grid {
                points,
                lower,
                upper,
            } => {
                if *points == 0 || !(*lower > 0.0 && lower <= upper) {
                    return bad("grid needs points ≥ 1 and 0 < lower ≤ upper".into());
                }
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn points(&self) -> Vec<Point> {
        let graphs: Vec<GraphPoint> = match &self.topology {
            TopologySpec::Random {
                p: RatioSpec::Fixed(ps),
            } => ps.iter().map(|&p| GraphPoint::Random(p)).collect(),
            TopologySpec::Random {
                p: RatioSpec::Uniform { low, high },
            } => vec![GraphPoint::RandomUniform(*low, *high)],
            TopologySpec::Special { kinds } => {
                kinds.iter().map(|&k| GraphPoint::Special(k)).collect()
            }
            TopologySpec::Grid { dims } => dims.iter().map(|&d| GraphPoint::Grid(d)).collect(),
            TopologySpec::Bipartite { imbalance, p } => imbalance
                .iter()
                .map(|&i| GraphPoint::Bipartite {
                    imbalance: i,
                    p: *p,
                })
                .collect(),
        };
        let shapes: Vec<Option<f64>> = if self.kappa_f.is_empty() {
            vec![None]
        } else {
            self.kappa_f.iter().map(|&k| Some(k)).collect()
        };
        let mut points = Vec::new();
        for graph in &graphs {
            for &kappa_f in &shapes {
                points.push(Point {
                    index: points.len(),
                    graph: *graph,
                    kappa_f,
                });
            }
        }
        points
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphPoint {
    Random(f64),
    RandomUniform(f64, f64),
    Special(TopologyKind),
    Grid([usize; 3]),
    Bipartite { imbalance: usize, p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub index: usize,
    pub graph: GraphPoint,
    pub kappa_f: Option<f64>,
}

/// Everything derived from one (point, seed).
pub struct Instance {
    pub topology: Topology,
    pub metrics: NetworkMetrics,
    pub incidence: IncidenceSet,
    pub spectra: GraphSpectra,
    pub objectives: ObjectiveSet,
    pub profile: ObjectiveProfile,
    pub bundle: RateBundle,
    pub reference: ReferenceSolution,
}

pub fn build_topology(
    agents: usize,
    graph: GraphPoint,
    seed: u64,
) -> Result<Topology, TopologyError> {
    match graph {
        GraphPoint::Random(p) => topology::random_connected(agents, p, seed),
        GraphPoint::RandomUniform(low, high) => {
            let p = seeding::rng(seed, Stream::Parameters).random_range(low..=high);
            topology::random_connected(agents, p, seed)
        }
        GraphPoint::Special(kind) => topology::special(kind, agents),
        GraphPoint::Grid([x, y, z]) => topology::grid3d(x, y, z),
        GraphPoint::Bipartite { imbalance, p } => topology::bipartite(agents, imbalance, p, seed),
    }
}

impl Instance {
    pub fn build(
        config: &ExperimentConfig,
        point: &Point,
        seed: u64,
    ) -> Result<Self, ExperimentError> {
        let topology = build_topology(config.agents, point.graph, seed)?;
        Self::from_topology(
            topology,
            config.dim,
            point.kappa_f,
            config.noise_variance,
            seed,
        )
    }

    pub fn from_topology(
        topology: Topology,
        dim: usize,
        kappa_f: Option<f64>,
        noise_variance: f64,
        seed: u64,
    ) -> Result<Self, ExperimentError> {
        let metrics = topology::metrics(&topology);
        let incidence = spectral::build_incidence(&topology, dim);
        let spectra = spectral::spectra(&incidence)?;
        let mut objectives =
            ObjectiveSet::generate_with_noise(topology.agents(), dim, seed, noise_variance);
        if let Some(k) = kappa_f {
            objectives = objectives.shape_condition(k);
        }
        let profile = objectives.profile()?;
        let bundle = RateBundle::new(&spectra, &profile)?;
        let reference = ReferenceSolution::for_objectives(&objectives, &incidence)?;
        Ok(Instance {
            topology,
            metrics,
            incidence,
            spectra,
            objectives,
            profile,
            bundle,
            reference,
        })
    }

    pub fn problem(&self) -> Problem<'_, QuadraticLocal> {
        Problem {
            topology: &self.topology,
            locals: &self.objectives.locals,
            incidence: &self.incidence,
            reference: &self.reference,
        }
    }

    pub fn x_star_norm(&self) -> f64 {
        self.reference
            .x_star
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Contraction constant at `c` using the rate-optimal `μ*`.
    pub fn certificate(&self, c: f64) -> Result<Certificate, RateError> {
        Ok(Certificate {
            delta: rates::delta(self.bundle.mu_star, c, &self.spectra, &self.profile)?,
            m_f: self.profile.m_f,
        })
    }

    pub fn admm_config(&self, config: &ExperimentConfig, c: f64) -> AdmmConfig {
        AdmmConfig {
            max_iter: config.max_iter,
            tol: config.tol,
            floor_rel: config.floor_rel,
            check_contraction: config.check_contraction,
            track_duals: config.check_contraction,
            ..AdmmConfig::new(c)
        }
    }

    pub fn run_admm(&self, config: &AdmmConfig) -> Result<admm::Trajectory, AdmmError> {
        let cert = if config.check_contraction {
            Some(self.certificate(config.c)?)
        } else {
            None
        };
        admm::run(&self.problem(), config, cert)
    }
}

/// `points` values log-spaced on `[low, high]`; a single point gives `low`.
pub fn log_grid(low: f64, high: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![low; points];
    }
    let (a, b) = (low.ln(), high.ln());
    (0..points)
        .map(|i| {
            if i + 1 == points {
                high
            } else {
                (a + (b - a) * i as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

/// Index of the smallest rate; ties go to the earlier (smaller-c) entry, NaN never wins.
pub fn argmin_rate(rates: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &r) in rates.iter().enumerate() {
        if r.is_nan() {
            continue;
        }
        if best.is_none_or(|b| r < rates[b]) {
            best = Some(i);
        }
    }
    best
}

/// Outcome of a c-grid search; `reports[i]` belongs to `grid[i]`.
pub struct CSearch {
    pub grid: Vec<f64>,
    pub reports: Vec<Result<RateReport, AdmmError>>,
    pub best: Option<usize>,
}

impl CSearch {
    pub fn c_star(&self) -> Option<f64> {
        self.best.map(|i| self.grid[i])
    }
}

/// Terminal `ρ̄` at every grid value; `c*` is the argmin.
pub fn best_practical_c(instance: &Instance, grid: Vec<f64>, base: &AdmmConfig) -> CSearch {
    let reports: Vec<Result<RateReport, AdmmError>> = grid
        .iter()
        .map(|&c| {
            let config = AdmmConfig { c, ..base.clone() };
            instance.run_admm(&config).map(|t| t.report)
        })
        .collect();
    let rates: Vec<f64> = reports
        .iter()
        .map(|r| r.as_ref().map_or(f64::NAN, |r| r.rho_bar))
        .collect();
    CSearch {
        best: argmin_rate(&rates),
        grid,
        reports,
    }
}

/// Default c-search grid: `MIN_GRID_POINTS`·2.5 log points on `[c_t/10³, 10c_t]`.
pub fn default_c_grid(c_t: f64) -> Vec<f64> {
    log_grid(c_t * 1e-3, c_t * 10.0, 50)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: ExperimentKind,
    pub point: usize,
    pub seed: u64,
    pub agents: usize,
    pub p: Option<f64>,
    pub kappa_g: Option<f64>,
    pub kappa_f: Option<f64>,
    pub kappa_f_target: Option<f64>,
    pub c: Option<f64>,
    pub theta: Option<f64>,
    pub method: String,
    pub rho_bar: Option<f64>,
    pub rho_t: Option<f64>,
    pub iterations: Option<usize>,
    pub terminal_error: Option<f64>,
    pub relative_error: Option<f64>,
    pub diameter: Option<usize>,
    pub min_degree: Option<usize>,
    pub geometric_degree: Option<f64>,
    pub imbalance: Option<usize>,
    pub trajectory: Option<String>,
    pub status: String,
}

pub const ROW_HEADER: &str =
    "experiment,point,seed,L,p,kappa_G,kappa_f,kappa_f_target,c,theta,method,rho_bar,rho_t,\
iterations,terminal_error,relative_error,D,d_s,L_d,imbalance,trajectory,status,within_bound";

fn cell<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

/// Shortest round-trip form, with an exponent for very small or large values.
fn num(v: &Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

impl ResultRow {
    fn blank(config: &ExperimentConfig, point: &Point, seed: u64) -> Self {
        ResultRow {
            experiment: config.experiment,
            point: point.index,
            seed,
            agents: config.agents,
            p: None,
            kappa_g: None,
            kappa_f: None,
            kappa_f_target: point.kappa_f,
            c: None,
            theta: None,
            method: String::new(),
            rho_bar: None,
            rho_t: None,
            iterations: None,
            terminal_error: None,
            relative_error: None,
            diameter: None,
            min_degree: None,
            geometric_degree: None,
            imbalance: None,
            trajectory: None,
            status: "ok".into(),
        }
    }

    fn for_instance(config: &ExperimentConfig, point: &Point, seed: u64, inst: &Instance) -> Self {
        ResultRow {
            agents: inst.topology.agents(),
            p: Some(inst.metrics.ratio),
            kappa_g: Some(inst.spectra.kappa_g),
            kappa_f: Some(inst.profile.kappa_f),
            rho_t: Some(inst.bundle.rho_t),
            diameter: Some(inst.metrics.diameter),
            min_degree: Some(inst.metrics.min_degree),
            geometric_degree: Some(inst.metrics.geometric_degree),
            imbalance: inst.metrics.imbalance,
            ..Self::blank(config, point, seed)
        }
    }

    fn with_report(mut self, report: &RateReport, x_norm: f64) -> Self {
        self.rho_bar = Some(report.rho_bar);
        self.iterations = Some(report.iterations);
        self.terminal_error = Some(report.terminal_error);
        self.relative_error = Some(report.terminal_error / x_norm);
        self
    }

    fn failed(mut self, err: &ExperimentError) -> Self {
        let tag = if err.is_invariant_violation() {
            "invariant_violation"
        } else {
            "error"
        };
        self.status = format!("{tag}: {err}").replace([',', '\n', '"'], ";");
        self
    }

    pub fn is_invariant_violation(&self) -> bool {
        self.status.starts_with("invariant_violation")
    }

    /// `ρ̄ ≤ ρ_t + 1e-6`, reported for runs at `c = c_t`.
    pub fn within_bound(&self) -> Option<bool> {
        if self.theta != Some(1.0) || !self.method.starts_with("admm") {
            return None;
        }
        Some(self.rho_bar? <= self.rho_t? + RATE_BOUND_SLACK)
    }

    pub fn to_csv_line(&self) -> String {
        [
            self.experiment.as_str().to_string(),
            self.point.to_string(),
            self.seed.to_string(),
            self.agents.to_string(),
            num(&self.p),
            num(&self.kappa_g),
            num(&self.kappa_f),
            num(&self.kappa_f_target),
            num(&self.c),
            num(&self.theta),
            self.method.clone(),
            num(&self.rho_bar),
            num(&self.rho_t),
            cell(&self.iterations),
            num(&self.terminal_error),
            num(&self.relative_error),
            cell(&self.diameter),
            cell(&self.min_degree),
            num(&self.geometric_degree),
            cell(&self.imbalance),
            cell(&self.trajectory),
            self.status.clone(),
            cell(&self.within_bound()),
        ]
        .join(",")
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
    /// (file name, CSV text).
    pub trajectories: Vec<(String, String)>,
    pub groups: String,
}

impl ExperimentOutput {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(ROW_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv_line());
            out.push('\n');
        }
        out
    }

    pub fn has_invariant_violation(&self) -> bool {
        self.rows.iter().any(ResultRow::is_invariant_violation)
    }

    /// Writes `rows.csv`, `groups.csv`, and `trajectories/*.csv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rows.csv"), self.rows_csv())?;
        std::fs::write(dir.join("groups.csv"), &self.groups)?;
        if !self.trajectories.is_empty() {
            let tdir = dir.join("trajectories");
            std::fs::create_dir_all(&tdir)?;
            for (name, csv) in &self.trajectories {
                std::fs::write(tdir.join(name), csv)?;
            }
        }
        Ok(())
    }
}

struct UnitOutput {
    rows: Vec<ResultRow>,
    trajectories: Vec<(String, String)>,
}

fn trajectory_name(hash: &str, point: usize, seed: u64, label: &str) -> String {
    format!("{hash}_p{point:03}_s{seed}_{label}.csv")
}

/// The c values a unit runs, with their θ = c/c_t and a method label.
fn c_schedule(config: &ExperimentConfig, c_t: f64) -> Vec<(f64, String)> {
    match &config.c {
        CPolicy::CT => vec![(c_t, "admm".into())],
        CPolicy::Theta { values } => values
            .iter()
            .map(|&t| (if t == 1.0 { c_t } else { t * c_t }, "admm".into()))
            .collect(),
        CPolicy::Explicit { values } => values.iter().map(|&c| (c, "admm".into())).collect(),
        CPolicy::Grid {
            points,
            lower,
            upper,
        } => log_grid(c_t * lower, c_t * upper, *points)
            .into_iter()
            .map(|c| (c, "admm_grid".into()))
            .collect(),
    }
}

/// Which solvers a batch runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Methods {
    Admm,
    Dgd,
    Both,
}

impl Methods {
    /// ADMM everywhere, plus DGD for `dgd_compare`.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        if kind == ExperimentKind::DgdCompare {
            Methods::Both
        } else {
            Methods::Admm
        }
    }

    fn admm(self) -> bool {
        self != Methods::Dgd
    }

    fn dgd(self) -> bool {
        self != Methods::Admm
    }
}

fn run_unit(
    config: &ExperimentConfig,
    methods: Methods,
    hash: &str,
    point: &Point,
    seed: u64,
) -> UnitOutput {
    let inst = match Instance::build(config, point, seed) {
        Ok(i) => i,
        Err(e) => {
            let mut row = ResultRow::blank(config, point, seed);
            row.method = "admm".into();
            return UnitOutput {
                rows: vec![row.failed(&e)],
                trajectories: Vec::new(),
            };
        }
    };
    let base = ResultRow::for_instance(config, point, seed, &inst);
    let x_norm = inst.x_star_norm();
    let c_t = inst.bundle.c_t;
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();

    let schedule = if methods.admm() {
        c_schedule(config, c_t)
    } else {
        Vec::new()
    };
    let grid_mode = matches!(config.c, CPolicy::Grid { .. });
    let mut grid_rates = Vec::new();
    for (idx, (c, method)) in schedule.iter().enumerate() {
        let mut row = ResultRow {
            c: Some(*c),
            theta: Some(c / c_t),
            method: method.clone(),
            ..base.clone()
        };
        match inst.run_admm(&inst.admm_config(config, *c)) {
            Ok(tr) => {
                row = row.with_report(&tr.report, x_norm);
                grid_rates.push(tr.report.rho_bar);
                if config.write_trajectories && !grid_mode {
                    let label = if schedule.len() == 1 {
                        "admm".to_string()
                    } else {
                        format!("admm_c{idx:02}")
                    };
                    let name = trajectory_name(hash, point.index, seed, &label);
                    trajectories.push((name.clone(), tr.to_csv()));
                    row.trajectory = Some(name);
                }
            }
            Err(e) => {
                grid_rates.push(f64::NAN);
                row = row.failed(&e.into());
            }
        }
        rows.push(row);
    }

    // A grid sweep also reports the runs at c_t and at the grid argmin c*.
    if grid_mode && methods.admm() {
        let c_star = argmin_rate(&grid_rates).map(|i| schedule[i].0);
        for (label, c) in [("admm_c_t", Some(c_t)), ("admm_c_star", c_star)] {
            let Some(c) = c else { continue };
            let mut row = ResultRow {
                c: Some(c),
                theta: Some(if label == "admm_c_t" { 1.0 } else { c / c_t }),
                method: label.into(),
                ..base.clone()
            };
            match inst.run_admm(&inst.admm_config(config, c)) {
                Ok(tr) => {
                    row = row.with_report(&tr.report, x_norm);
                    if config.write_trajectories {
                        let name = trajectory_name(hash, point.index, seed, label);
                        trajectories.push((name.clone(), tr.to_csv()));
                        row.trajectory = Some(name);
                    }
                }
                Err(e) => row = row.failed(&e.into()),
            }
            rows.push(row);
        }
    }

    if methods.dgd() {
        let mut row = ResultRow {
            method: "dgd".into(),
            ..base.clone()
        };
        match dgd::run_dgd(
            &inst.topology,
            &inst.objectives.locals,
            &inst.reference.x_star,
            config.max_iter,
        ) {
            Ok(tr) => {
                row = row.with_report(&tr.report, x_norm);
                if config.write_trajectories {
                    let name = trajectory_name(hash, point.index, seed, "dgd");
                    trajectories.push((name.clone(), tr.to_csv()));
                    row.trajectory = Some(name);
                }
            }
            Err(e) => row = row.failed(&e.into()),
        }
        rows.push(row);
    }
    UnitOutput { rows, trajectories }
}

/// Runs every (point, seed) unit and gathers rows in (point, seed) order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    run_experiment_with(config, Methods::for_kind(config.experiment))
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    methods: Methods,
) -> Result<ExperimentOutput, ExperimentError> {
    config.validate()?;
    let hash = config.hash();
    let seeds = config.seeds.values();
    let units: Vec<(Point, u64)> = config
        .points()
        .into_iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let outputs: Vec<UnitOutput> = units
        .par_iter()
        .map(|(p, s)| run_unit(config, methods, &hash, p, *s))
        .collect();
    let mut out = ExperimentOutput {
        config_hash: hash,
        ..ExperimentOutput::default()
    };
    for u in outputs {
        out.rows.extend(u.rows);
        out.trajectories.extend(u.trajectories);
    }
    out.groups = group_by_kappa_g(&out.rows, KAPPA_G_BINS);
    Ok(out)
}

/// Bin index of `value` among `bins` equal-width bins of `[ln lo, ln hi]`.
pub fn log_bin(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = (value.ln() - lo.ln()) / (hi.ln() - lo.ln());
    ((t * bins as f64).floor() as usize).min(bins - 1)
}

pub const GROUP_HEADER: &str =
    "method,theta,kappa_f_target,bin,kappa_G_low,kappa_G_high,count,rho_bar_mean,rho_bar_min,rho_bar_max,rho_t_mean";

/// Per-(method, θ, κ_f) summaries of `ρ̄` over log-κ_G bins spanning the observed range.
pub fn group_by_kappa_g(rows: &[ResultRow], bins: usize) -> String {
    let ok: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.status == "ok" && r.rho_bar.is_some() && r.kappa_g.is_some())
        .collect();
    let mut out = String::from(GROUP_HEADER);
    out.push('\n');
    if ok.is_empty() || bins == 0 {
        return out;
    }
    let kg = |r: &ResultRow| r.kappa_g.unwrap_or(f64::NAN);
    let lo = ok.iter().map(|r| kg(r)).fold(f64::INFINITY, f64::min);
    let hi = ok.iter().map(|r| kg(r)).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi.ln() - lo.ln()) / bins as f64;

    type Key = (String, String, String, usize);
    let mut groups: BTreeMap<Key, Vec<&ResultRow>> = BTreeMap::new();
    for r in ok {
        let key = (
            r.method.clone(),
            num(&r.theta.map(|t| (t * 1e9).round() / 1e9)),
            num(&r.kappa_f_target),
            log_bin(kg(r), lo, hi, bins),
        );
        groups.entry(key).or_default().push(r);
    }
    for ((method, theta, kappa_f, bin), members) in groups {
        let rho: Vec<f64> = members.iter().filter_map(|r| r.rho_bar).collect();
        let n = rho.len() as f64;
        let mean = rho.iter().sum::<f64>() / n;
        let min = rho.iter().copied().fold(f64::INFINITY, f64::min);
        let max = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let rho_t = members.iter().filter_map(|r| r.rho_t).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{method},{theta},{kappa_f},{bin},{:?},{:?},{},{mean:?},{min:?},{max:?},{rho_t:?}",
            (lo.ln() + width * bin as f64).exp(),
            (lo.ln() + width * (bin + 1) as f64).exp(),
            members.len()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"experiment": "{}", "agents": 8, "topology": {{"kind": "random", "p": [0.5]}},
                "seeds": [1, 2], "kappa_f": [10]}}"#,
            kind.as_str()
        ))
        .unwrap()
    }

    #[test]
    fn config_defaults() {
        let c = small(ExperimentKind::LinearConvergence);
        assert_eq!(c.dim, 3);
        assert_eq!(c.max_iter, 4000);
        assert_eq!(c.tol, 1e-15);
        assert_eq!(c.c, CPolicy::CT);
        assert_eq!(c.noise_variance, 0.1);
    }

    #[test]
    fn config_rejects_bad_input() {
        let bad = [
            r#"{"experiment": "c_sweep", "agents": 8, "topology": {"kind": "random", "p": [0.5]}, "seeds": []}"#,
            r#"{"experiment": "c_sweep", "agents": 8, "topology": {"kind": "random", "p": [1.5]}, "seeds": [1]}"#,
            r#"{"experiment": "c_sweep", "agents": 8, "topology": {"kind": "grid", "dims": [[2, 2, 3]]}, "seeds": [1]}"#,
            r#"{"experiment": "c_sweep", "agents": 8, "topology": {"kind": "special", "kinds": ["random"]}, "seeds": [1]}"#,
            r#"{"experiment": "c_sweep", "agents": 8, "topology": {"kind": "random", "p": [0.5]}, "seeds": [1], "kappa_f": [0.5]}"#,
            r#"{"experiment": "c_sweep", "agents": 8, "topology": {"kind": "random", "p": [0.5]}, "seeds": [1], "bogus": 1}"#,
            r#"{"experiment": "nope", "agents": 8, "topology": {"kind": "random", "p": [0.5]}, "seeds": [1]}"#,
        ];
        for text in bad {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn seed_ranges_and_override() {
        let c = ExperimentConfig::from_json(
            r#"{"experiment": "topology_study", "agents": 8, "topology": {"kind": "random", "p": {"low": 0.3, "high": 1.0}},
                "seeds": {"start": 5, "count": 3}}"#,
        )
        .unwrap();
        assert_eq!(c.seeds.values(), vec![5, 6, 7]);
        assert_eq!(c.with_seed(9).seeds.values(), vec![9]);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-3, 10.0, 5);
        assert_eq!(g.len(), 5);
        assert!((g[0] - 1e-3).abs() < 1e-18);
        assert_eq!(g[4], 10.0);
        assert!((g[1] - 1e-2).abs() < 1e-15);
        assert_eq!(log_grid(0.3, 3.0, 1), vec![0.3]);
    }

    #[test]
    fn argmin_prefers_smaller_c_on_ties() {
        assert_eq!(argmin_rate(&[0.9, 0.5, 0.5, 0.7]), Some(1));
        assert_eq!(argmin_rate(&[f64::NAN, 0.8]), Some(1));
        assert_eq!(argmin_rate(&[0.4]), Some(0));
        assert_eq!(argmin_rate(&[]), None);
    }

    #[test]
    fn single_point_grid_returns_that_point() {
        let c = small(ExperimentKind::CSweep);
        let inst = Instance::build(&c, &c.points()[0], 1).unwrap();
        let search = best_practical_c(&inst, vec![0.25], &AdmmConfig::new(1.0));
        assert_eq!(search.c_star(), Some(0.25));
    }

    #[test]
    fn bins_cover_range() {
        assert_eq!(log_bin(1.0, 1.0, 100.0, 20), 0);
        assert_eq!(log_bin(100.0, 1.0, 100.0, 20), 19);
        assert_eq!(log_bin(10.0, 1.0, 100.0, 20), 10);
        assert_eq!(log_bin(5.0, 5.0, 5.0, 20), 0);
    }

    #[test]
    fn linear_convergence_rows_and_files() {
        let out = run_experiment(&small(ExperimentKind::LinearConvergence)).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.trajectories.len(), 2);
        for r in &out.rows {
            assert_eq!(r.status, "ok");
            assert_eq!(r.within_bound(), Some(true));
        }
        let csv = out.rows_csv();
        assert!(csv.starts_with(ROW_HEADER));
        let width = ROW_HEADER.split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == width));
    }

    #[test]
    fn grid_sweep_adds_c_t_and_c_star_rows() {
        let mut c = small(ExperimentKind::CSweep).with_seed(3);
        c.c = CPolicy::Grid {
            points: 6,
            lower: 1e-2,
            upper: 10.0,
        };
        let out = run_experiment(&c).unwrap();
        let methods: Vec<&str> = out.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods.iter().filter(|m| **m == "admm_grid").count(), 6);
        assert!(methods.contains(&"admm_c_t") && methods.contains(&"admm_c_star"));
        assert_eq!(out.trajectories.len(), 2);
    }

    #[test]
    fn dgd_compare_adds_a_row() {
        let out = run_experiment(&small(ExperimentKind::DgdCompare).with_seed(4)).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[1].method, "dgd");
        assert_eq!(out.rows[1].within_bound(), None);
    }

    #[test]
    fn failing_unit_is_marked_not_fatal() {
        let c = ExperimentConfig::from_json(
            r#"{"experiment": "topology_study", "agents": 8, "topology": {"kind": "random", "p": [0.1, 0.5]},
                "seeds": [1]}"#,
        )
        .unwrap();
        let out = run_experiment(&c).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows[0].status.starts_with("error"));
        assert_eq!(out.rows[1].status, "ok");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = small(ExperimentKind::LinearConvergence);
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 16);
        assert_ne!(a.hash(), a.with_seed(3).hash());
    }
}
