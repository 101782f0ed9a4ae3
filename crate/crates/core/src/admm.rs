//! Decentralized ADMM for consensus optimization.
//!
//! The production engine ([`SimplifiedEngine`]) keeps only the primal iterate
//! `x` and the agent multiplier `α = M₋β`. Each agent solves
//!
//! ```text
//! ∇f_i(x_i^{k+1}) + α_i^k + 2c|N_i| x_i^{k+1} − c(|N_i| x_i^k + Σ_{j∈N_i} x_j^k) = 0
//! α_i^{k+1} = α_i^k + c(|N_i| x_i^{k+1} − Σ_{j∈N_i} x_j^{k+1})
//! ```
//!
//! reading only its neighbors. With dual tracking enabled it also carries the
//! arc variables `β^{k+1} = β^k + (c/2)M₋ᵀx^{k+1}` and `z^k = ½M₊ᵀx^k`, which
//! are what the G-norm contraction certificate is stated in.
//!
//! [`FullAdmm`] runs the unreduced three-step ADMM (x-minimization,
//! z-minimization, multiplier ascent) with dense global matrices. It shares no
//! code path with the per-agent engine and serves as its equivalence oracle.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use thiserror::Error;

use crate::objectives::{
    self, CentralSolution, LocalObjective, ObjectiveError, ObjectiveSet, ShiftedSolve,
};
use crate::rates::{self, RateError, RateReport};
use crate::spectral::{IncidenceSet, SignedLaplacianPinv, SpectralError};
use crate::topology::Topology;

/// Multiplicative slack on the per-iteration contraction check.
pub const CONTRACTION_SLACK: f64 = 1e-8;
/// Additive slack on `‖x^{k+1} − x*‖² ≤ ‖u^k − u*‖²_G / m_f`.
pub const R_LINEAR_SLACK: f64 = 1e-12;
/// Relative tolerance of the three-term G-norm identity.
pub const IDENTITY_TOL: f64 = 1e-8;
/// The identity compares squared distances built from differences of
/// iterates and `x*`; those lose about `ε‖x*‖/‖x − x*‖` relative accuracy, so
/// it is only checked while `‖x^{k+1} − x*‖ > IDENTITY_FLOOR_REL · max(1, ‖x*‖)`.
pub const IDENTITY_FLOOR_REL: f64 = 1e-6;
/// Stationarity tolerance of the reference multiplier.
pub const KKT_STATIONARITY_TOL: f64 = 1e-8;
pub const KKT_CONSENSUS_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AdmmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error("KKT residual {residual:e} of `{condition}` exceeds {tolerance:e}")]
    Kkt {
        condition: &'static str,
        residual: f64,
        tolerance: f64,
    },
    #[error(
        "contraction violated at k={k}: ‖u^(k+1)−u*‖²_G = {next:e} > {bound:e} \
         = (1+slack)/(1+δ)·‖u^k−u*‖²_G with ‖u^k−u*‖²_G = {current:e}, δ = {delta}"
    )]
    Contraction {
        k: usize,
        current: f64,
        next: f64,
        bound: f64,
        delta: f64,
    },
    #[error("R-linear bound violated at k={k}: ‖x^(k+1)−x*‖² = {err_sq:e} > ‖u^k−u*‖²_G/m_f = {bound:e}")]
    RLinear { k: usize, err_sq: f64, bound: f64 },
    #[error("G-norm identity residual {residual:e} at k={k} exceeds {tolerance:e}")]
    Identity {
        k: usize,
        residual: f64,
        tolerance: f64,
    },
}

impl AdmmError {
    /// True for failures of a theoretical guarantee, as opposed to bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            AdmmError::Kkt { .. }
                | AdmmError::Contraction { .. }
                | AdmmError::RLinear { .. }
                | AdmmError::Identity { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub c: f64,
    pub max_iter: usize,
    /// Stop once `‖x^k − x*‖ ≤ tol`.
    pub tol: f64,
    /// Stop once `‖x^k − x*‖ ≤ floor_rel · ‖x*‖`; 0 disables. Iterates cannot
    /// get closer to `x*` than a few ulps of `‖x*‖`, and ratios of errors
    /// below that level measure rounding rather than convergence.
    pub floor_rel: f64,
    pub track_duals: bool,
    /// Assert the contraction, R-linear, and identity checks at every
    /// iteration. Implies `track_duals`.
    pub check_contraction: bool,
    /// Checks are skipped once `‖x^k − x*‖` is at or below this level.
    pub check_floor: f64,
    /// Run the per-agent x-updates on the rayon pool.
    pub parallel: bool,
}

pub const DEFAULT_MAX_ITER: usize = 4000;
pub const DEFAULT_TOL: f64 = 1e-15;
pub const DEFAULT_FLOOR_REL: f64 = 1e-13;
pub const DEFAULT_CHECK_FLOOR: f64 = 1e-12;

impl AdmmConfig {
    pub fn new(c: f64) -> Self {
        AdmmConfig {
            c,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            floor_rel: DEFAULT_FLOOR_REL,
            track_duals: false,
            check_contraction: false,
            check_floor: DEFAULT_CHECK_FLOOR,
            parallel: false,
        }
    }

    pub fn checked(c: f64) -> Self {
        AdmmConfig {
            track_duals: true,
            check_contraction: true,
            ..AdmmConfig::new(c)
        }
    }

    pub fn validate(&self) -> Result<(), AdmmError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(AdmmError::Config(format!(
                "penalty c = {} must be positive",
                self.c
            )));
        }
        if self.max_iter == 0 {
            return Err(AdmmError::Config("max_iter must be at least 1".into()));
        }
        if !(self.tol >= 0.0) || !(self.floor_rel >= 0.0) {
            return Err(AdmmError::Config("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Iterate of the per-agent engine. Arc variables are present iff duals are tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub k: usize,
    pub x: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
}

impl AdmmState {
    /// `x⁰ = 0`, `α⁰ = 0`, and with tracking `β⁰ = 0`, `z⁰ = ½M₊ᵀx⁰ = 0`.
    pub fn zeros(agents: usize, dim: usize, tracked_arcs: Option<usize>) -> Self {
        AdmmState {
            k: 0,
            x: vec![0.0; agents * dim],
            alpha: vec![0.0; agents * dim],
            beta: tracked_arcs.map(|a| vec![0.0; a * dim]),
            z: tracked_arcs.map(|a| vec![0.0; a * dim]),
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// `c‖z − z'‖² + ‖β − β'‖²/c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GNorm {
    pub c: f64,
}

impl GNorm {
    pub fn dist_sq(&self, z: &[f64], beta: &[f64], z_ref: &[f64], beta_ref: &[f64]) -> f64 {
        self.c * dist(z, z_ref).powi(2) + dist(beta, beta_ref).powi(2) / self.c
    }
}

/// Primal-dual optimum `(x*, z*, β*)` with `β*` the unique multiplier in col(M₋ᵀ).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x_common: DVector<f64>,
    pub x_star: Vec<f64>,
    pub z_star: Vec<f64>,
    pub beta_star: Vec<f64>,
    /// `∇f(x*)`, stacked.
    pub grad_star: Vec<f64>,
    pub stationarity_residual: f64,
    pub consensus_residual: f64,
}

impl ReferenceSolution {
    /// Uses the centralized damped-Newton minimizer.
    pub fn compute<O: LocalObjective>(locals: &[O], inc: &IncidenceSet) -> Result<Self, AdmmError> {
        let common = objectives::centralized_minimizer(locals)?;
        Self::from_central(
            locals,
            inc,
            CentralSolution::replicate(common, locals.len()),
        )
    }

    /// Uses the dense normal-equation solve of a least-squares set.
    pub fn for_objectives(set: &ObjectiveSet, inc: &IncidenceSet) -> Result<Self, AdmmError> {
        Self::from_central(&set.locals, inc, set.centralized_solve()?)
    }

    /// `z* = ½M₊ᵀx*`, `β* = −M₋ᵀ(2L₋)†∇f(x*)`: the minimum-norm solution of
    /// `M₋β = −∇f(x*)`.
    pub fn from_central<O: LocalObjective>(
        locals: &[O],
        inc: &IncidenceSet,
        central: CentralSolution,
    ) -> Result<Self, AdmmError> {
        let x_star = central.stacked;
        let grad_star = objectives::stacked_gradient(locals, &x_star)?;
        let pinv = SignedLaplacianPinv::new(inc)?;
        let beta_star: Vec<f64> = inc
            .apply_m_minus_t(&pinv.apply(&grad_star))
            .into_iter()
            .map(|v| -v)
            .collect();
        let z_star: Vec<f64> = inc
            .apply_m_plus_t(&x_star)
            .into_iter()
            .map(|v| 0.5 * v)
            .collect();

        let m_beta = inc.apply_m_minus(&beta_star);
        let stationarity: Vec<f64> = grad_star.iter().zip(&m_beta).map(|(g, m)| g + m).collect();
        let stationarity_residual = norm(&stationarity);
        let consensus_residual = norm(&inc.apply_m_minus_t(&x_star));
        if stationarity_residual > KKT_STATIONARITY_TOL {
            return Err(AdmmError::Kkt {
                condition: "∇f(x*) + M₋β* = 0",
                residual: stationarity_residual,
                tolerance: KKT_STATIONARITY_TOL,
            });
        }
        if consensus_residual > KKT_CONSENSUS_TOL {
            return Err(AdmmError::Kkt {
                condition: "M₋ᵀx* = 0",
                residual: consensus_residual,
                tolerance: KKT_CONSENSUS_TOL,
            });
        }
        Ok(ReferenceSolution {
            x_common: central.common,
            x_star,
            z_star,
            beta_star,
            grad_star,
            stationarity_residual,
            consensus_residual,
        })
    }
}

/// Relative distance of `β` from col(M₋ᵀ), via the projector `M₋ᵀ(2L₋)†M₋`.
pub fn column_space_residual(inc: &IncidenceSet, pinv: &SignedLaplacianPinv, beta: &[f64]) -> f64 {
    let projected = inc.apply_m_minus_t(&pinv.apply(&inc.apply_m_minus(beta)));
    dist(beta, &projected) / norm(beta).max(f64::MIN_POSITIVE)
}

/// Per-agent iteration with factorizations prepared once for a fixed `c`.
pub struct SimplifiedEngine<'a> {
    topology: &'a Topology,
    incidence: Option<&'a IncidenceSet>,
    solvers: Vec<Box<dyn ShiftedSolve + 'a>>,
    dim: usize,
    c: f64,
    parallel: bool,
}

impl<'a> SimplifiedEngine<'a> {
    pub fn new<O: LocalObjective>(
        topology: &'a Topology,
        locals: &'a [O],
        c: f64,
    ) -> Result<Self, AdmmError> {
        if locals.len() != topology.agents() {
            return Err(AdmmError::Config(format!(
                "{} objectives for {} agents",
                locals.len(),
                topology.agents()
            )));
        }
        if !(c > 0.0) {
            return Err(AdmmError::Config(format!(
                "penalty c = {c} must be positive"
            )));
        }
        let dim = locals.first().map_or(0, |o| o.dim());
        let solvers = locals
            .iter()
            .enumerate()
            .map(|(i, o)| o.shifted_solver(2.0 * c * topology.degree(i) as f64))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SimplifiedEngine {
            topology,
            incidence: None,
            solvers,
            dim,
            c,
            parallel: false,
        })
    }

    /// Enables `β`/`z` bookkeeping.
    pub fn with_duals(mut self, incidence: &'a IncidenceSet) -> Self {
        self.incidence = Some(incidence);
        self
    }

    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn initial_state(&self) -> AdmmState {
        AdmmState::zeros(
            self.topology.agents(),
            self.dim,
            self.incidence.map(|inc| inc.arc_count()),
        )
    }

    fn neighbor_sum(&self, x: &[f64], agent: usize) -> Vec<f64> {
        let n = self.dim;
        let mut acc = vec![0.0; n];
        for &j in self.topology.neighbors(agent) {
            for c in 0..n {
                acc[c] += x[j * n + c];
            }
        }
        acc
    }

    fn update_agent(&self, state: &AdmmState, i: usize) -> Result<DVector<f64>, ObjectiveError> {
        let n = self.dim;
        let d = self.topology.degree(i) as f64;
        let sum = self.neighbor_sum(&state.x, i);
        let xi = &state.x[i * n..(i + 1) * n];
        let rhs = DVector::from_fn(n, |c, _| {
            -state.alpha[i * n + c] + self.c * (d * xi[c] + sum[c])
        });
        self.solvers[i].solve(&rhs, &DVector::from_column_slice(xi))
    }

    pub fn step(&self, state: &AdmmState) -> Result<AdmmState, AdmmError> {
        let n = self.dim;
        let agents = self.topology.agents();
        let blocks: Vec<Result<DVector<f64>, ObjectiveError>> = if self.parallel {
            (0..agents)
                .into_par_iter()
                .map(|i| self.update_agent(state, i))
                .collect()
        } else {
            (0..agents).map(|i| self.update_agent(state, i)).collect()
        };
        let mut x = Vec::with_capacity(agents * n);
        for b in blocks {
            x.extend(b?.iter());
        }

        let mut alpha = state.alpha.clone();
        for i in 0..agents {
            let d = self.topology.degree(i) as f64;
            let sum = self.neighbor_sum(&x, i);
            for c in 0..n {
                alpha[i * n + c] += self.c * (d * x[i * n + c] - sum[c]);
            }
        }

        let (beta, z) = match (self.incidence, &state.beta) {
            (Some(inc), Some(beta)) => {
                let diff = inc.apply_m_minus_t(&x);
                let beta: Vec<f64> = beta
                    .iter()
                    .zip(&diff)
                    .map(|(b, d)| b + 0.5 * self.c * d)
                    .collect();
                let z: Vec<f64> = inc
                    .apply_m_plus_t(&x)
                    .into_iter()
                    .map(|v| 0.5 * v)
                    .collect();
                (Some(beta), Some(z))
            }
            _ => (None, None),
        };

        Ok(AdmmState {
            k: state.k + 1,
            x,
            alpha,
            beta,
            z,
        })
    }
}

/// One per-agent step without a prepared engine.
pub fn step_simplified<O: LocalObjective>(
    state: &AdmmState,
    topology: &Topology,
    locals: &[O],
    c: f64,
) -> Result<AdmmState, AdmmError> {
    SimplifiedEngine::new(topology, locals, c)?.step(state)
}

/// Iterate of the unreduced ADMM, `λ = [β; γ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl FullState {
    pub fn beta(&self) -> DVector<f64> {
        let half = self.lambda.len() / 2;
        self.lambda.rows(0, half).into_owned()
    }

    pub fn gamma(&self) -> DVector<f64> {
        let half = self.lambda.len() / 2;
        self.lambda.rows(half, half).into_owned()
    }
}

/// Three-step ADMM on `min f(x) s.t. Ax + Bz = 0` with dense `A = [A₁; A₂]`,
/// `B = [−I; −I]`, for least-squares objectives.
pub struct FullAdmm {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    gram: DMatrix<f64>,
    x_system: Cholesky<f64, Dyn>,
    z_system: Cholesky<f64, Dyn>,
    data_rhs: DVector<f64>,
    c: f64,
}

impl FullAdmm {
    pub fn new(set: &ObjectiveSet, inc: &IncidenceSet, c: f64) -> Result<Self, AdmmError> {
        let n = set.dim;
        let l = set.agents();
        if inc.block_dim != n || inc.agents() != l {
            return Err(AdmmError::Config(format!(
                "incidence built for {}×N={} but objectives have {}×N={}",
                inc.agents(),
                inc.block_dim,
                l,
                n
            )));
        }
        let arcs = inc.arc_count();
        let mut a1 = DMatrix::zeros(arcs * n, l * n);
        let mut a2 = DMatrix::zeros(arcs * n, l * n);
        for (q, &(i, j)) in inc.arcs.iter().enumerate() {
            for d in 0..n {
                a1[(q * n + d, i * n + d)] = 1.0;
                a2[(q * n + d, j * n + d)] = 1.0;
            }
        }
        let mut a = DMatrix::zeros(2 * arcs * n, l * n);
        a.rows_mut(0, arcs * n).copy_from(&a1);
        a.rows_mut(arcs * n, arcs * n).copy_from(&a2);
        let eye = DMatrix::<f64>::identity(arcs * n, arcs * n);
        let mut b = DMatrix::zeros(2 * arcs * n, arcs * n);
        b.rows_mut(0, arcs * n).copy_from(&(-&eye));
        b.rows_mut(arcs * n, arcs * n).copy_from(&(-&eye));

        let mut gram = DMatrix::zeros(l * n, l * n);
        let mut data_rhs = DVector::zeros(l * n);
        for (i, local) in set.locals.iter().enumerate() {
            gram.view_mut((i * n, i * n), (n, n))
                .copy_from(&local.gram());
            data_rhs
                .rows_mut(i * n, n)
                .copy_from(&local.u.tr_mul(&local.v));
        }
        let x_system = Cholesky::new(&gram + a.tr_mul(&a) * c)
            .ok_or_else(|| AdmmError::Config("x-update system is not SPD".into()))?;
        let z_system = Cholesky::new(b.tr_mul(&b) * c)
            .ok_or_else(|| AdmmError::Config("z-update system is not SPD".into()))?;
        Ok(FullAdmm {
            a,
            b,
            gram,
            x_system,
            z_system,
            data_rhs,
            c,
        })
    }

    /// `λ⁰ = 0` (so `β⁰ = −γ⁰`) and `z⁰ = ½M₊ᵀx⁰ = ½(A₁ + A₂)x⁰`.
    pub fn initial_state(&self, x0: DVector<f64>) -> FullState {
        let half = self.a.nrows() / 2;
        let ax = &self.a * &x0;
        let z = (ax.rows(0, half) + ax.rows(half, half)) * 0.5;
        FullState {
            x: x0,
            lambda: DVector::zeros(self.a.nrows()),
            z,
        }
    }

    pub fn step(&self, s: &FullState) -> FullState {
        let c = self.c;
        // x: ∇f(x) + Aᵀλ + cAᵀ(Ax + Bz^k) = 0.
        let rhs = &self.data_rhs - self.a.tr_mul(&s.lambda) - self.a.tr_mul(&(&self.b * &s.z)) * c;
        let x = self.x_system.solve(&rhs);
        // z: Bᵀλ + cBᵀ(Ax + Bz) = 0.
        let rhs = -self.b.tr_mul(&s.lambda) - self.b.tr_mul(&(&self.a * &x)) * c;
        let z = self.z_system.solve(&rhs);
        let lambda = &s.lambda + (&self.a * &x + &self.b * &z) * c;
        FullState { x, z, lambda }
    }

    /// Norm of the x-update stationarity equation at `next` given `prev`.
    pub fn x_stationarity_residual(&self, prev: &FullState, next: &FullState) -> f64 {
        let grad = &self.gram * &next.x - &self.data_rhs;
        let r = grad
            + self.a.tr_mul(&prev.lambda)
            + self.a.tr_mul(&(&self.a * &next.x + &self.b * &prev.z)) * self.c;
        r.norm()
    }
}

/// One full-ADMM step from `state` (builds the dense system each call).
pub fn step_full(
    state: &FullState,
    set: &ObjectiveSet,
    inc: &IncidenceSet,
    c: f64,
) -> Result<FullState, AdmmError> {
    Ok(FullAdmm::new(set, inc, c)?.step(state))
}

/// Contraction constant and strong convexity used by the per-iteration checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub delta: f64,
    pub m_f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub err_x: f64,
    pub err_u_g2: Option<f64>,
    pub rho_k: Option<f64>,
    pub rho_bar_k: Option<f64>,
}

/// Worst-case residuals observed while duals were tracked.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub contraction_checks: usize,
    /// Largest `‖u^{k+1}−u*‖²_G / ‖u^k−u*‖²_G` among checked steps.
    pub max_contraction_ratio: f64,
    pub identity_checks: usize,
    pub max_identity_residual: f64,
    /// `‖∇f(x^{k+1}) + M₋β^{k+1} − cM₊(z^k − z^{k+1})‖ / (1 + ‖∇f(x^{k+1})‖)`.
    pub max_dual_residual: f64,
    pub max_z_coupling: f64,
    pub max_alpha_mismatch: f64,
    pub final_column_space_residual: f64,
    pub g_distance_monotone: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<IterationRecord>,
    pub report: RateReport,
    pub final_state: AdmmState,
    pub diagnostics: Option<Diagnostics>,
}

impl Trajectory {
    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.err_x).collect()
    }

    /// `k,err_x,err_u_G2,rho_k,rho_bar_k` with empty fields where not defined.
    pub fn to_csv(&self) -> String {
        trajectory_csv(&self.records)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

pub fn trajectory_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("k,err_x,err_u_G2,rho_k,rho_bar_k\n");
    for r in records {
        out.push_str(&format!(
            "{},{:e},{},{},{}\n",
            r.k,
            r.err_x,
            opt(r.err_u_g2),
            opt(r.rho_k),
            opt(r.rho_bar_k)
        ));
    }
    out
}

/// Attaches `ρ_k` and `ρ̄_k` from a finished error series.
pub(crate) fn records_with_rates(
    errors: &[f64],
    g_norms: Option<&[f64]>,
) -> Result<(Vec<IterationRecord>, RateReport), RateError> {
    let report = rates::empirical_rates(errors)?;
    let records = (0..=report.iterations)
        .map(|k| IterationRecord {
            k,
            err_x: errors[k],
            err_u_g2: g_norms.map(|g| g[k]),
            rho_k: k.checked_sub(1).map(|s| report.rho_k[s]),
            rho_bar_k: k.checked_sub(1).map(|s| report.rho_bar_k[s]),
        })
        .collect();
    Ok((records, report))
}

/// Everything a run reads; shared immutably between concurrent runs.
pub struct Problem<'a, O> {
    pub topology: &'a Topology,
    pub locals: &'a [O],
    pub incidence: &'a IncidenceSet,
    pub reference: &'a ReferenceSolution,
}

/// Iterates the per-agent engine from the zero state until the error reaches
/// `tol` (or the relative floor) or `max_iter` steps have been taken.
pub fn run<O: LocalObjective>(
    problem: &Problem<'_, O>,
    config: &AdmmConfig,
    certificate: Option<Certificate>,
) -> Result<Trajectory, AdmmError> {
    config.validate()?;
    if config.check_contraction && certificate.is_none() {
        return Err(AdmmError::Config(
            "contraction checks need a certificate (δ, m_f)".into(),
        ));
    }
    let track = config.track_duals || config.check_contraction;
    let reference = problem.reference;
    let inc = problem.incidence;
    let mut engine = SimplifiedEngine::new(problem.topology, problem.locals, config.c)?
        .parallel(config.parallel);
    if track {
        engine = engine.with_duals(inc);
    }
    let g = GNorm { c: config.c };
    let x_norm = norm(&reference.x_star);
    let stop_at = config.tol.max(config.floor_rel * x_norm);
    let identity_floor = IDENTITY_FLOOR_REL * x_norm.max(1.0);

    let mut state = engine.initial_state();
    let mut errors = vec![dist(&state.x, &reference.x_star)];
    let mut g_norms = Vec::new();
    let mut diag = Diagnostics {
        g_distance_monotone: true,
        ..Diagnostics::default()
    };
    let u_dist = |s: &AdmmState| {
        g.dist_sq(
            s.z.as_deref().unwrap_or_default(),
            s.beta.as_deref().unwrap_or_default(),
            &reference.z_star,
            &reference.beta_star,
        )
    };
    if track {
        g_norms.push(u_dist(&state));
    }

    while state.k < config.max_iter && errors[state.k] > stop_at {
        let next = engine.step(&state)?;
        let err_next = dist(&next.x, &reference.x_star);
        if track {
            let g_next = u_dist(&next);
            let g_now = g_norms[state.k];
            let checking = errors[state.k] > config.check_floor;
            let identity = checking && err_next > identity_floor;
            track_iteration(
                problem, config, &state, &next, g_now, g_next, identity, &mut diag,
            )?;
            if checking {
                if let Some(cert) = certificate {
                    diag.contraction_checks += 1;
                    if g_now > 0.0 {
                        diag.max_contraction_ratio = diag.max_contraction_ratio.max(g_next / g_now);
                    }
                    if config.check_contraction {
                        let bound = (1.0 + CONTRACTION_SLACK) / (1.0 + cert.delta) * g_now;
                        if g_next > bound {
                            return Err(AdmmError::Contraction {
                                k: state.k,
                                current: g_now,
                                next: g_next,
                                bound,
                                delta: cert.delta,
                            });
                        }
                        let r_bound = g_now / cert.m_f + R_LINEAR_SLACK;
                        if err_next * err_next > r_bound {
                            return Err(AdmmError::RLinear {
                                k: state.k,
                                err_sq: err_next * err_next,
                                bound: r_bound,
                            });
                        }
                    }
                }
            }
            g_norms.push(g_next);
        }
        errors.push(err_next);
        state = next;
    }

    let diagnostics = if track {
        let pinv = SignedLaplacianPinv::new(inc)?;
        if let Some(beta) = &state.beta {
            diag.final_column_space_residual = if norm(beta) > 0.0 {
                column_space_residual(inc, &pinv, beta)
            } else {
                0.0
            };
        }
        Some(diag)
    } else {
        None
    };
    let (records, report) = records_with_rates(&errors, track.then_some(g_norms.as_slice()))?;
    Ok(Trajectory {
        records,
        report,
        final_state: state,
        diagnostics,
    })
}

#[allow(clippy::too_many_arguments)]
fn track_iteration<O: LocalObjective>(
    problem: &Problem<'_, O>,
    config: &AdmmConfig,
    now: &AdmmState,
    next: &AdmmState,
    g_now: f64,
    g_next: f64,
    check_identity: bool,
    diag: &mut Diagnostics,
) -> Result<(), AdmmError> {
    let inc = problem.incidence;
    let reference = problem.reference;
    let c = config.c;
    let (z0, b0) = (
        now.z.as_deref().unwrap_or_default(),
        now.beta.as_deref().unwrap_or_default(),
    );
    let (z1, b1) = (
        next.z.as_deref().unwrap_or_default(),
        next.beta.as_deref().unwrap_or_default(),
    );

    let grad = objectives::stacked_gradient(problem.locals, &next.x)?;
    let dx: Vec<f64> = next
        .x
        .iter()
        .zip(&reference.x_star)
        .map(|(a, b)| a - b)
        .collect();
    let dg: Vec<f64> = grad
        .iter()
        .zip(&reference.grad_star)
        .map(|(a, b)| a - b)
        .collect();
    let lhs = dot(&dx, &dg);
    let step_g = GNorm { c }.dist_sq(z0, b0, z1, b1);
    let rhs = g_now - g_next - step_g;
    let scale = g_now.max(lhs.abs()).max(f64::MIN_POSITIVE);
    let identity_residual = (lhs - rhs).abs() / scale;
    if check_identity {
        diag.identity_checks += 1;
        if g_next > g_now {
            diag.g_distance_monotone = false;
        }
        diag.max_identity_residual = diag.max_identity_residual.max(identity_residual);
        if config.check_contraction && identity_residual > IDENTITY_TOL {
            return Err(AdmmError::Identity {
                k: now.k,
                residual: identity_residual,
                tolerance: IDENTITY_TOL,
            });
        }
    }

    // ∇f(x^{k+1}) + M₋β^{k+1} − cM₊(z^k − z^{k+1}) = 0.
    let dz: Vec<f64> = z0.iter().zip(z1).map(|(a, b)| a - b).collect();
    let m_beta = inc.apply_m_minus(b1);
    let m_dz = inc.apply_m_plus(&dz);
    let dual: Vec<f64> = (0..grad.len())
        .map(|i| grad[i] + m_beta[i] - c * m_dz[i])
        .collect();
    diag.max_dual_residual = diag
        .max_dual_residual
        .max(norm(&dual) / (1.0 + norm(&grad)));

    let half_mx: Vec<f64> = inc
        .apply_m_plus_t(&next.x)
        .into_iter()
        .map(|v| 0.5 * v)
        .collect();
    diag.max_z_coupling = diag
        .max_z_coupling
        .max(dist(&half_mx, z1) / norm(z1).max(f64::MIN_POSITIVE));
    diag.max_alpha_mismatch = diag
        .max_alpha_mismatch
        .max(dist(&m_beta, &next.alpha) / norm(&next.alpha).max(f64::MIN_POSITIVE));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::build_incidence;
    use crate::topology::{self, TopologyKind};
    use approx::assert_relative_eq;

    fn scalar_pair(v1: f64, v2: f64) -> ObjectiveSet {
        let one = DMatrix::identity(1, 1);
        ObjectiveSet::new(
            vec![
                objectives::QuadraticLocal::new(one.clone(), DVector::from_element(1, v1)),
                objectives::QuadraticLocal::new(one, DVector::from_element(1, v2)),
            ],
            DVector::zeros(1),
        )
    }

    #[test]
    fn two_agent_first_step_by_hand() {
        let (v1, v2) = (1.2, -0.6);
        let set = scalar_pair(v1, v2);
        let t = topology::special(TopologyKind::Line, 2).unwrap();
        let s1 = step_simplified(&AdmmState::zeros(2, 1, None), &t, &set.locals, 1.0).unwrap();
        assert_relative_eq!(s1.x[0], v1 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s1.x[1], v2 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s1.alpha[0], (v1 - v2) / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s1.alpha[1], -(v1 - v2) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn consensus_optimum_is_a_fixed_point() {
        let set = ObjectiveSet::generate(6, 3, 2);
        let t = topology::random_connected(6, 0.6, 2).unwrap();
        let inc = build_incidence(&t, 3);
        let r = ReferenceSolution::for_objectives(&set, &inc).unwrap();
        let alpha: Vec<f64> = r.grad_star.iter().map(|g| -g).collect();
        let state = AdmmState {
            k: 0,
            x: r.x_star.clone(),
            alpha: alpha.clone(),
            beta: None,
            z: None,
        };
        let next = step_simplified(&state, &t, &set.locals, 0.7).unwrap();
        for (a, b) in next.x.iter().zip(&r.x_star) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in next.alpha.iter().zip(&alpha) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn x_update_reads_only_neighbors() {
        let set = ObjectiveSet::generate(8, 2, 4);
        let t = topology::special(TopologyKind::Cycle, 8).unwrap();
        let mut state = AdmmState::zeros(8, 2, None);
        for (k, v) in state.x.iter_mut().enumerate() {
            *v = (k as f64).sin();
        }
        let base = step_simplified(&state, &t, &set.locals, 1.3).unwrap();
        // Agent 0 neighbors 1 and 7; perturbing agent 4 must not reach it.
        let mut poked = state.clone();
        poked.x[4 * 2] += 10.0;
        poked.alpha[4 * 2 + 1] -= 3.0;
        let after = step_simplified(&poked, &t, &set.locals, 1.3).unwrap();
        assert_eq!(&base.x[0..2], &after.x[0..2]);
        assert_ne!(&base.x[8..10], &after.x[8..10]);
        // α-update of agent 0 reads x^{k+1} of agents 0, 1, 7 only.
        assert_eq!(&base.alpha[0..2], &after.alpha[0..2]);
    }

    #[test]
    fn parallel_step_is_bit_identical() {
        let set = ObjectiveSet::generate(30, 3, 6);
        let t = topology::random_connected(30, 0.3, 6).unwrap();
        let seq = SimplifiedEngine::new(&t, &set.locals, 0.4).unwrap();
        let par = SimplifiedEngine::new(&t, &set.locals, 0.4)
            .unwrap()
            .parallel(true);
        let mut a = seq.initial_state();
        let mut b = par.initial_state();
        for _ in 0..25 {
            a = seq.step(&a).unwrap();
            b = par.step(&b).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn identical_agents_have_zero_multiplier() {
        let local = ObjectiveSet::generate(1, 3, 9).locals.remove(0);
        let set = ObjectiveSet::new(vec![local; 5], DVector::zeros(3));
        let inc = build_incidence(&topology::special(TopologyKind::Cycle, 5).unwrap(), 3);
        let r = ReferenceSolution::for_objectives(&set, &inc).unwrap();
        assert!(r.beta_star.iter().all(|b| b.abs() < 1e-12));
        assert!(r.grad_star.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn two_agent_multiplier_closed_form() {
        // f_i = ½(x − v_i)²: x* = (v₁+v₂)/2, ∇f₁(x*) = (v₂−v₁)/2 = −∇f₂(x*).
        // Arcs (0,1), (1,0); M₋β = [β₀ − β₁, β₁ − β₀] = −∇f(x*). Minimum norm:
        // β₀ = −β₁ = (v₁ − v₂)/4.
        let (v1, v2) = (2.0, -1.0);
        let set = scalar_pair(v1, v2);
        let inc = build_incidence(&topology::special(TopologyKind::Line, 2).unwrap(), 1);
        let r = ReferenceSolution::for_objectives(&set, &inc).unwrap();
        assert_relative_eq!(r.beta_star[0], (v1 - v2) / 4.0, epsilon = 1e-12);
        assert_relative_eq!(r.beta_star[1], -(v1 - v2) / 4.0, epsilon = 1e-12);
        assert_relative_eq!(r.x_star[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn reference_kkt_on_random_instance() {
        let set = ObjectiveSet::generate(12, 3, 13);
        let inc = build_incidence(&topology::random_connected(12, 0.4, 13).unwrap(), 3);
        let r = ReferenceSolution::for_objectives(&set, &inc).unwrap();
        assert!(r.stationarity_residual <= 1e-8);
        assert_eq!(r.consensus_residual, 0.0);
        let pinv = SignedLaplacianPinv::new(&inc).unwrap();
        assert!(column_space_residual(&inc, &pinv, &r.beta_star) < 1e-10);
        let generic = ReferenceSolution::compute(&set.locals, &inc).unwrap();
        for (a, b) in generic.beta_star.iter().zip(&r.beta_star) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn full_admm_first_step_matches_on_single_edge() {
        let set = scalar_pair(0.8, -2.0);
        let t = topology::special(TopologyKind::Line, 2).unwrap();
        let inc = build_incidence(&t, 1);
        let full = FullAdmm::new(&set, &inc, 1.0).unwrap();
        let s0 = full.initial_state(DVector::zeros(2));
        let s1 = full.step(&s0);
        let simple = step_simplified(&AdmmState::zeros(2, 1, None), &t, &set.locals, 1.0).unwrap();
        assert!((s1.x[0] - simple.x[0]).abs() < 1e-12);
        assert!((s1.x[1] - simple.x[1]).abs() < 1e-12);
        assert!(full.x_stationarity_residual(&s0, &s1) < 1e-10);
    }

    #[test]
    fn full_admm_keeps_beta_opposite_gamma() {
        let set = ObjectiveSet::generate(5, 3, 21);
        let inc = build_incidence(&topology::random_connected(5, 0.7, 21).unwrap(), 3);
        let full = FullAdmm::new(&set, &inc, 0.9).unwrap();
        let mut s = full.initial_state(DVector::zeros(15));
        for _ in 0..100 {
            let next = full.step(&s);
            assert!(full.x_stationarity_residual(&s, &next) < 1e-10);
            s = next;
            let gap = (s.beta() + s.gamma()).amax();
            assert!(gap <= 1e-12 * (1.0 + s.beta().amax()), "gap {gap}");
        }
    }

    #[test]
    fn run_rejects_bad_config() {
        let set = ObjectiveSet::generate(3, 1, 0);
        let t = topology::special(TopologyKind::Line, 3).unwrap();
        let inc = build_incidence(&t, 1);
        let r = ReferenceSolution::for_objectives(&set, &inc).unwrap();
        let p = Problem {
            topology: &t,
            locals: &set.locals,
            incidence: &inc,
            reference: &r,
        };
        assert!(matches!(
            run(&p, &AdmmConfig::new(0.0), None),
            Err(AdmmError::Config(_))
        ));
        assert!(matches!(
            run(&p, &AdmmConfig::checked(1.0), None),
            Err(AdmmError::Config(_))
        ));
        let mut cfg = AdmmConfig::new(1.0);
        cfg.max_iter = 0;
        assert!(run(&p, &cfg, None).is_err());
    }

    #[test]
    fn symmetric_agents_stay_identical() {
        let local = objectives::QuadraticLocal::new(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![1.0, -2.0, 0.5]),
        );
        let set = ObjectiveSet::new(vec![local; 6], DVector::zeros(3));
        let t = topology::special(TopologyKind::Complete, 6).unwrap();
        let engine = SimplifiedEngine::new(&t, &set.locals, 0.8).unwrap();
        let mut s = engine.initial_state();
        for _ in 0..400 {
            s = engine.step(&s).unwrap();
            for i in 1..6 {
                assert_eq!(&s.x[0..3], &s.x[i * 3..i * 3 + 3]);
            }
        }
        assert!((s.x[0] - 1.0).abs() < 1e-12);
    }
}
