//! Decentralized consensus optimization with ADMM.
//!
//! The crate is organized around the pipeline used by every experiment:
//!
//! ```text
//! topology ──► spectral ──┐
//!                         ├──► rates (c_t, μ*, δ_t, ρ_t) ──► admm::run ──► trajectory / rows
//! objectives ─► profile ──┘
//! ```
//!
//! * [`topology`] generates connected communication graphs and measures them.
//! * [`spectral`] builds incidence/Laplacian matrices and the graph condition number κ_G.
//! * [`objectives`] holds the per-agent least-squares losses and their curvature constants.
//! * [`admm`] runs the per-agent iteration, the unreduced three-step ADMM used as an
//!   oracle, and the dual bookkeeping needed for per-iteration contraction checks.
//! * [`rates`] evaluates the linear-rate certificate and empirical rate statistics.
//! * [`dgd`] is the distributed gradient descent comparator.
//! * [`experiment`] drives seeded batches and writes CSV artifacts.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod dgd;
pub mod experiment;
pub mod objectives;
pub mod rates;
pub mod seeding;
pub mod spectral;
pub mod topology;

pub use admm::{AdmmConfig, AdmmError, AdmmState, FullAdmm, ReferenceSolution, Trajectory};
pub use objectives::{LocalObjective, ObjectiveProfile, ObjectiveSet, QuadraticLocal};
pub use rates::{RateBundle, RateReport};
pub use spectral::{GraphSpectra, IncidenceSet};
pub use topology::{NetworkMetrics, Topology, TopologyKind};
