//! Per-agent strongly convex losses.
//!
//! Experiments use the least-squares family `f_i(x) = ½‖v_i − U_i x‖²`
//! ([`QuadraticLocal`]). The engine is written against [`LocalObjective`], so
//! any function with declared curvature bounds can be plugged in; its x-update
//! then falls back to damped Newton.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::seeding::{self, Stream};

/// λ_min(UᵀU) below this triggers a redraw of U during generation.
pub const MIN_GRAM_EIGENVALUE: f64 = 1e-8;
/// Variance of the measurement noise added to `U x_true`.
pub const DEFAULT_NOISE_VARIANCE: f64 = 0.1;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_STEPS: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("expected a stacked vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("agent {agent}: Hessian is not positive definite (λ_min = {min_eigenvalue})")]
    NotStronglyConvex { agent: usize, min_eigenvalue: f64 },
    #[error("normal matrix of the centralized problem is singular")]
    SingularNormalMatrix,
    #[error("damped Newton stalled at gradient norm {residual} after {steps} steps")]
    NewtonNoConvergence { steps: usize, residual: f64 },
    #[error("objective CSV line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Solves `∇f(x) + shift·x = rhs` for one agent.
pub trait ShiftedSolve: Send + Sync {
    fn solve(
        &self,
        rhs: &DVector<f64>,
        start: &DVector<f64>,
    ) -> Result<DVector<f64>, ObjectiveError>;
}

pub trait LocalObjective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Strong convexity and gradient Lipschitz constants `(m_i, M_i)`.
    fn curvature(&self) -> Result<(f64, f64), ObjectiveError>;

    fn shifted_solver(&self, shift: f64) -> Result<Box<dyn ShiftedSolve + '_>, ObjectiveError> {
        Ok(Box::new(NewtonShifted {
            objective: self,
            shift,
        }))
    }
}

struct NewtonShifted<'a, O: ?Sized> {
    objective: &'a O,
    shift: f64,
}

impl<O: LocalObjective + ?Sized> ShiftedSolve for NewtonShifted<'_, O> {
    fn solve(
        &self,
        rhs: &DVector<f64>,
        start: &DVector<f64>,
    ) -> Result<DVector<f64>, ObjectiveError> {
        let merit = |x: &DVector<f64>| {
            self.objective.value(x) + 0.5 * self.shift * x.norm_squared() - rhs.dot(x)
        };
        let residual = |x: &DVector<f64>| self.objective.gradient(x) + x * self.shift - rhs;
        let tol = NEWTON_TOL * (1.0 + rhs.norm());
        let mut x = start.clone();
        let mut g = residual(&x);
        for _ in 0..NEWTON_MAX_STEPS {
            if g.norm() <= tol {
                return Ok(x);
            }
            let h = self.objective.hessian(&x) + DMatrix::identity(x.len(), x.len()) * self.shift;
            let dir = Cholesky::new(h)
                .ok_or(ObjectiveError::NotStronglyConvex {
                    agent: 0,
                    min_eigenvalue: f64::NAN,
                })?
                .solve(&-&g);
            let (f0, slope) = (merit(&x), g.dot(&dir));
            let mut step = 1.0;
            while step > 1e-10 && merit(&(&x + &dir * step)) > f0 + 1e-4 * step * slope {
                step *= 0.5;
            }
            x += &dir * step;
            g = residual(&x);
        }
        if g.norm() <= tol {
            Ok(x)
        } else {
            Err(ObjectiveError::NewtonNoConvergence {
                steps: NEWTON_MAX_STEPS,
                residual: g.norm(),
            })
        }
    }
}

/// `f(x) = ½‖v − U x‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLocal {
    pub u: DMatrix<f64>,
    pub v: DVector<f64>,
}

impl QuadraticLocal {
    pub fn new(u: DMatrix<f64>, v: DVector<f64>) -> Self {
        assert!(u.is_square(), "measurement matrix must be square");
        assert_eq!(u.nrows(), v.len(), "measurement vector length");
        QuadraticLocal { u, v }
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.u.tr_mul(&self.u)
    }

    /// Unconstrained local minimizer `(UᵀU)⁻¹Uᵀv`.
    pub fn local_minimizer(&self) -> Option<DVector<f64>> {
        Cholesky::new(self.gram()).map(|c| c.solve(&self.u.tr_mul(&self.v)))
    }
}

struct QuadraticShifted {
    factor: Cholesky<f64, Dyn>,
    utv: DVector<f64>,
}

impl ShiftedSolve for QuadraticShifted {
    fn solve(
        &self,
        rhs: &DVector<f64>,
        _start: &DVector<f64>,
    ) -> Result<DVector<f64>, ObjectiveError> {
        Ok(self.factor.solve(&(&self.utv + rhs)))
    }
}

impl LocalObjective for QuadraticLocal {
    fn dim(&self) -> usize {
        self.v.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.v - &self.u * x).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.u.tr_mul(&(&self.u * x - &self.v))
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.gram()
    }

    fn curvature(&self) -> Result<(f64, f64), ObjectiveError> {
        let eig = self.gram().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if lo <= 0.0 {
            return Err(ObjectiveError::NotStronglyConvex {
                agent: 0,
                min_eigenvalue: lo,
            });
        }
        Ok((lo, hi))
    }

    fn shifted_solver(&self, shift: f64) -> Result<Box<dyn ShiftedSolve + '_>, ObjectiveError> {
        let n = self.dim();
        let factor = Cholesky::new(self.gram() + DMatrix::identity(n, n) * shift).ok_or(
            ObjectiveError::NotStronglyConvex {
                agent: 0,
                min_eigenvalue: f64::NAN,
            },
        )?;
        Ok(Box::new(QuadraticShifted {
            factor,
            utv: self.u.tr_mul(&self.v),
        }))
    }
}

/// Global constants of Assumption-1 type over all agents.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ObjectiveProfile {
    pub m_f: f64,
    pub big_m_f: f64,
    pub kappa_f: f64,
}

pub fn profile_of<O: LocalObjective>(locals: &[O]) -> Result<ObjectiveProfile, ObjectiveError> {
    let mut m_f = f64::INFINITY;
    let mut big_m_f = 0.0f64;
    for (agent, local) in locals.iter().enumerate() {
        let (lo, hi) = local.curvature().map_err(|e| match e {
            ObjectiveError::NotStronglyConvex { min_eigenvalue, .. } => {
                ObjectiveError::NotStronglyConvex {
                    agent,
                    min_eigenvalue,
                }
            }
            other => other,
        })?;
        m_f = m_f.min(lo);
        big_m_f = big_m_f.max(hi);
    }
    Ok(ObjectiveProfile {
        m_f,
        big_m_f,
        kappa_f: big_m_f / m_f,
    })
}

fn block(x: &[f64], agent: usize, n: usize) -> DVector<f64> {
    DVector::from_column_slice(&x[agent * n..(agent + 1) * n])
}

/// Stacked gradient of `f(x) = Σ f_i(x_i)`.
pub fn stacked_gradient<O: LocalObjective>(
    locals: &[O],
    x: &[f64],
) -> Result<Vec<f64>, ObjectiveError> {
    let n = locals.first().map_or(0, |o| o.dim());
    let expected = locals.len() * n;
    if x.len() != expected {
        return Err(ObjectiveError::LengthMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(locals
        .iter()
        .enumerate()
        .flat_map(|(i, o)| o.gradient(&block(x, i, n)).data.as_vec().clone())
        .collect())
}

/// Minimizer of `Σ_i f_i(x̃)` over the common variable, by damped Newton.
///
/// For quadratics the first step from the origin is exactly the normal-equation
/// solve; later steps only polish rounding.
pub fn centralized_minimizer<O: LocalObjective>(
    locals: &[O],
) -> Result<DVector<f64>, ObjectiveError> {
    let n = locals.first().map_or(0, |o| o.dim());
    let grad = |x: &DVector<f64>| {
        locals
            .iter()
            .fold(DVector::zeros(n), |acc, o| acc + o.gradient(x))
    };
    let value = |x: &DVector<f64>| locals.iter().map(|o| o.value(x)).sum::<f64>();
    let scale = 1.0 + grad(&DVector::zeros(n)).norm();
    let mut x = DVector::zeros(n);
    let mut g = grad(&x);
    for _ in 0..NEWTON_MAX_STEPS {
        if g.norm() <= NEWTON_TOL * scale {
            return Ok(x);
        }
        let h = locals
            .iter()
            .fold(DMatrix::zeros(n, n), |acc, o| acc + o.hessian(&x));
        let dir = Cholesky::new(h)
            .ok_or(ObjectiveError::SingularNormalMatrix)?
            .solve(&-&g);
        let (f0, slope) = (value(&x), g.dot(&dir));
        let mut step = 1.0;
        while step > 1e-10 && value(&(&x + &dir * step)) > f0 + 1e-4 * step * slope {
            step *= 0.5;
        }
        let prev = g.norm();
        x += &dir * step;
        g = grad(&x);
        // Rounding floor reached: further steps cannot reduce the residual.
        if g.norm() >= prev && step == 1.0 {
            return Ok(x);
        }
    }
    Ok(x)
}

/// Consensus optimum as a single block and replicated over all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralSolution {
    pub common: DVector<f64>,
    pub stacked: Vec<f64>,
}

impl CentralSolution {
    pub fn replicate(common: DVector<f64>, agents: usize) -> Self {
        let stacked = (0..agents).flat_map(|_| common.iter().copied()).collect();
        CentralSolution { common, stacked }
    }
}

/// The least-squares instance shared by all agents of one experiment row.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSet {
    pub locals: Vec<QuadraticLocal>,
    pub dim: usize,
    pub x_true: DVector<f64>,
}

fn gaussian_matrix<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng))
}

impl ObjectiveSet {
    pub fn new(locals: Vec<QuadraticLocal>, x_true: DVector<f64>) -> Self {
        let dim = x_true.len();
        assert!(locals.iter().all(|l| l.dim() == dim), "agents must share N");
        ObjectiveSet {
            locals,
            dim,
            x_true,
        }
    }

    pub fn agents(&self) -> usize {
        self.locals.len()
    }

    pub fn generate(agents: usize, dim: usize, seed: u64) -> Self {
        Self::generate_with_noise(agents, dim, seed, DEFAULT_NOISE_VARIANCE)
    }

    /// `x_true ~ N(0, I)`, `U_i` entries `~ N(0, 1)`, `v_i = U_i x_true + e_i`
    /// with `e_i ~ N(0, noise_variance · I)`.
    pub fn generate_with_noise(agents: usize, dim: usize, seed: u64, noise_variance: f64) -> Self {
        assert!(agents >= 1 && dim >= 1);
        let mut signal_rng = seeding::rng(seed, Stream::TrueSignal);
        let mut matrix_rng = seeding::rng(seed, Stream::Measurement);
        let mut noise_rng = seeding::rng(seed, Stream::Noise);
        let x_true = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut signal_rng));
        let noise = Normal::new(0.0, noise_variance.sqrt()).expect("finite noise variance");
        let locals = (0..agents)
            .map(|_| {
                let u = loop {
                    let u = gaussian_matrix(dim, &mut matrix_rng);
                    if u.tr_mul(&u).symmetric_eigenvalues().min() >= MIN_GRAM_EIGENVALUE {
                        break u;
                    }
                };
                let e = DVector::from_fn(dim, |_, _| noise.sample(&mut noise_rng));
                let v = &u * &x_true + e;
                QuadraticLocal::new(u, v)
            })
            .collect();
        ObjectiveSet::new(locals, x_true)
    }

    /// Rebuilds every `U_i` with its singular values mapped affinely onto
    /// `[√(1/κ), 1]`, which pins the global condition number to `κ`.
    ///
    /// Measurements `v_i` are kept as they are.
    pub fn shape_condition(&self, kappa_target: f64) -> Self {
        assert!(kappa_target >= 1.0, "condition number target must be ≥ 1");
        let lower = (1.0 / kappa_target).sqrt();
        let locals = self
            .locals
            .iter()
            .map(|local| {
                let svd = local.u.clone().svd(true, true);
                let s = &svd.singular_values;
                let (s_min, s_max) = (s.min(), s.max());
                let mapped = if s_max - s_min <= 1e-12 * s_max {
                    DVector::from_element(s.len(), 1.0)
                } else {
                    s.map(|v| lower + (v - s_min) * (1.0 - lower) / (s_max - s_min))
                };
                let (left, right) = (
                    svd.u.as_ref().expect("left vectors requested"),
                    svd.v_t.as_ref().expect("right vectors requested"),
                );
                let u = left * DMatrix::from_diagonal(&mapped) * right;
                QuadraticLocal::new(u, local.v.clone())
            })
            .collect();
        ObjectiveSet::new(locals, self.x_true.clone())
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        stacked_gradient(&self.locals, x)
    }

    pub fn profile(&self) -> Result<ObjectiveProfile, ObjectiveError> {
        profile_of(&self.locals)
    }

    /// Solves `(Σ UᵢᵀUᵢ) x̃ = Σ Uᵢᵀvᵢ` by Cholesky.
    pub fn centralized_solve(&self) -> Result<CentralSolution, ObjectiveError> {
        let n = self.dim;
        let (gram, rhs) = self
            .locals
            .iter()
            .fold((DMatrix::zeros(n, n), DVector::zeros(n)), |(g, r), l| {
                (g + l.gram(), r + l.u.tr_mul(&l.v))
            });
        let x = Cholesky::new(gram)
            .ok_or(ObjectiveError::SingularNormalMatrix)?
            .solve(&rhs);
        Ok(CentralSolution::replicate(x, self.agents()))
    }

    /// CSV block: one row per agent with `U` row-major then `v`; a final
    /// `x_true` row carries the generating signal in the `v` columns.
    pub fn to_csv(&self) -> String {
        let n = self.dim;
        let mut header = vec!["agent".to_string()];
        for r in 1..=n {
            for c in 1..=n {
                header.push(format!("u_{r}_{c}"));
            }
        }
        header.extend((1..=n).map(|r| format!("v_{r}")));
        let mut out = header.join(",");
        out.push('\n');
        for (i, local) in self.locals.iter().enumerate() {
            let mut fields = vec![i.to_string()];
            for r in 0..n {
                for c in 0..n {
                    fields.push(format!("{:?}", local.u[(r, c)]));
                }
            }
            fields.extend(local.v.iter().map(|v| format!("{v:?}")));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        let mut fields = vec!["x_true".to_string()];
        fields.extend(std::iter::repeat_n(String::new(), n * n));
        fields.extend(self.x_true.iter().map(|v| format!("{v:?}")));
        out.push_str(&fields.join(","));
        out.push('\n');
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, ObjectiveError> {
        let err = |line: usize, message: String| ObjectiveError::Parse { line, message };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty input".into()))?;
        let width = header.split(',').count();
        let n = (1..=16)
            .find(|n| 1 + n * n + n == width)
            .ok_or_else(|| err(1, format!("{width} columns do not match any N")))?;
        let mut locals = Vec::new();
        let mut x_true = None;
        for (idx, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(err(idx + 1, format!("expected {width} fields")));
            }
            let num = |s: &str| -> Result<f64, ObjectiveError> {
                s.trim()
                    .parse()
                    .map_err(|e| err(idx + 1, format!("`{s}`: {e}")))
            };
            let v = fields[1 + n * n..]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>, _>>()?;
            if fields[0] == "x_true" {
                x_true = Some(DVector::from_vec(v));
                continue;
            }
            let u = fields[1..1 + n * n]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>, _>>()?;
            locals.push(QuadraticLocal::new(
                DMatrix::from_row_slice(n, n, &u),
                DVector::from_vec(v),
            ));
        }
        if locals.is_empty() {
            return Err(err(2, "no agent rows".into()));
        }
        Ok(ObjectiveSet::new(
            locals,
            x_true.unwrap_or_else(|| DVector::zeros(n)),
        ))
    }
}
