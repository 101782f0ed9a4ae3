//! Distributed gradient descent with Metropolis mixing and stepsize `1/k^{1/3}`.

use nalgebra::{DMatrix, DVector};

use crate::admm::{records_with_rates, IterationRecord};
use crate::objectives::LocalObjective;
use crate::rates::{RateError, RateReport};
use crate::topology::Topology;

/// Symmetric doubly stochastic matrix supported on the graph plus the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub weights: DMatrix<f64>,
}

impl MixingMatrix {
    /// Largest deviation of a row or column sum from 1.
    pub fn stochasticity_error(&self) -> f64 {
        let w = &self.weights;
        let rows = w.row_iter().map(|r| (r.sum() - 1.0).abs());
        let cols = w.column_iter().map(|c| (c.sum() - 1.0).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// `w_ij = 1/(1 + max(d_i, d_j))` on edges, `w_ii = 1 − Σ_j w_ij`.
pub fn metropolis_weights(t: &Topology) -> MixingMatrix {
    let l = t.agents();
    let mut w = DMatrix::zeros(l, l);
    for &(i, j) in t.edges() {
        let v = 1.0 / (1.0 + t.degree(i).max(t.degree(j)) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..l {
        let off: f64 = t.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix { weights: w }
}

#[derive(Debug, Clone)]
pub struct DgdTrajectory {
    pub records: Vec<IterationRecord>,
    pub report: RateReport,
    pub final_x: Vec<f64>,
}

impl DgdTrajectory {
    pub fn to_csv(&self) -> String {
        crate::admm::trajectory_csv(&self.records)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DgdError {
    #[error("iteration count must be at least 1")]
    NoIterations,
    #[error("{objectives} objectives for {agents} agents")]
    Mismatch { objectives: usize, agents: usize },
    #[error(transparent)]
    Rate(#[from] RateError),
}

/// `x_i^{k+1} = Σ_j w_ij x_j^k − (k+1)^{−1/3} ∇f_i(x_i^k)`.
pub fn dgd_step<O: LocalObjective>(
    t: &Topology,
    w: &MixingMatrix,
    locals: &[O],
    x: &[f64],
    k: usize,
) -> Vec<f64> {
    let n = locals.first().map_or(0, |o| o.dim());
    let step = 1.0 / ((k + 1) as f64).cbrt();
    let mut next = vec![0.0; x.len()];
    for i in 0..t.agents() {
        let g = locals[i].gradient(&DVector::from_column_slice(&x[i * n..(i + 1) * n]));
        for c in 0..n {
            let mut v = w.weights[(i, i)] * x[i * n + c];
            for &j in t.neighbors(i) {
                v += w.weights[(i, j)] * x[j * n + c];
            }
            next[i * n + c] = v - step * g[c];
        }
    }
    next
}

/// Runs [`dgd_step`] from `x⁰ = 0`, recording `‖x^k − x*‖`.
pub fn run_dgd<O: LocalObjective>(
    t: &Topology,
    locals: &[O],
    x_star: &[f64],
    iters: usize,
) -> Result<DgdTrajectory, DgdError> {
    if iters == 0 {
        return Err(DgdError::NoIterations);
    }
    if locals.len() != t.agents() {
        return Err(DgdError::Mismatch {
            objectives: locals.len(),
            agents: t.agents(),
        });
    }
    let n = locals.first().map_or(0, |o| o.dim());
    let w = metropolis_weights(t);
    let dist = |x: &[f64]| {
        x.iter()
            .zip(x_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut x = vec![0.0; t.agents() * n];
    let mut errors = vec![dist(&x)];
    for k in 0..iters {
        x = dgd_step(t, &w, locals, &x, k);
        errors.push(dist(&x));
        if errors[k + 1] == 0.0 {
            break;
        }
    }
    let (records, report) = records_with_rates(&errors, None)?;
    Ok(DgdTrajectory {
        records,
        report,
        final_x: x,
    })
}
