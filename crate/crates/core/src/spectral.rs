//! Incidence and Laplacian matrices of a topology and the spectral scalars
//! derived from them.
//!
//! Only the base (`N = 1`) matrices are stored and decomposed. The extended
//! operators used by the algorithm are `M ⊗ I_N`; their singular values are the
//! base ones repeated `N` times, so κ_G does not depend on `N`. The `apply_*`
//! methods act on stacked vectors blockwise, which is the extended operator
//! without ever forming it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::topology::Topology;

/// Relative threshold below which an eigenvalue counts as zero.
pub const ZERO_EIGEN_REL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("symmetric eigensolver did not converge on a {0}x{0} matrix")]
    NoConvergence(usize),
    #[error("signed Laplacian has {0} zero eigenvalues; the graph must be connected")]
    NotConnected(usize),
}

/// Base incidence and Laplacian matrices over the canonical arc order.
#[derive(Debug, Clone)]
pub struct IncidenceSet {
    pub arcs: Vec<(usize, usize)>,
    /// L × 2E unoriented incidence: 1 at rows `i` and `j` of arc `(i, j)`.
    pub m_plus: DMatrix<f64>,
    /// L × 2E oriented incidence: +1 at row `i`, −1 at row `j`.
    pub m_minus: DMatrix<f64>,
    /// Signless Laplacian D + A.
    pub l_plus: DMatrix<f64>,
    /// Signed Laplacian D − A.
    pub l_minus: DMatrix<f64>,
    /// Degree matrix.
    pub degree: DMatrix<f64>,
    /// Block size of the extended operators.
    pub block_dim: usize,
}

pub fn build_incidence(t: &Topology, block_dim: usize) -> IncidenceSet {
    let l = t.agents();
    let arcs = t.arcs();
    let mut m_plus = DMatrix::zeros(l, arcs.len());
    let mut m_minus = DMatrix::zeros(l, arcs.len());
    for (q, &(i, j)) in arcs.iter().enumerate() {
        m_plus[(i, q)] = 1.0;
        m_plus[(j, q)] = 1.0;
        m_minus[(i, q)] = 1.0;
        m_minus[(j, q)] = -1.0;
    }
    let l_plus = &m_plus * m_plus.transpose() * 0.5;
    let l_minus = &m_minus * m_minus.transpose() * 0.5;
    let degree = DMatrix::from_diagonal(&DVector::from_fn(l, |i, _| t.degree(i) as f64));
    IncidenceSet {
        arcs,
        m_plus,
        m_minus,
        l_plus,
        l_minus,
        degree,
        block_dim,
    }
}

impl IncidenceSet {
    pub fn agents(&self) -> usize {
        self.m_plus.nrows()
    }

    pub fn arc_count(&self) -> usize {
        self.arcs.len()
    }

    /// `(M ⊗ I_N)` for one of the base matrices.
    pub fn extended(&self, base: &DMatrix<f64>) -> DMatrix<f64> {
        base.kronecker(&DMatrix::<f64>::identity(self.block_dim, self.block_dim))
    }

    /// `M₊ᵀ x`: block `q` of the result is `x_i + x_j` for arc `q = (i, j)`.
    pub fn apply_m_plus_t(&self, x: &[f64]) -> Vec<f64> {
        self.arc_combine(x, 1.0)
    }

    /// `M₋ᵀ x`: block `q` is `x_i − x_j`.
    pub fn apply_m_minus_t(&self, x: &[f64]) -> Vec<f64> {
        self.arc_combine(x, -1.0)
    }

    /// `M₊ z`: scatters each arc block onto both endpoints.
    pub fn apply_m_plus(&self, z: &[f64]) -> Vec<f64> {
        self.arc_scatter(z, 1.0)
    }

    /// `M₋ β`: adds each arc block to its tail and subtracts it from its head.
    pub fn apply_m_minus(&self, beta: &[f64]) -> Vec<f64> {
        self.arc_scatter(beta, -1.0)
    }

    fn arc_combine(&self, x: &[f64], sign: f64) -> Vec<f64> {
        let n = self.block_dim;
        assert_eq!(x.len(), self.agents() * n, "stacked agent vector length");
        let mut out = Vec::with_capacity(self.arcs.len() * n);
        for &(i, j) in &self.arcs {
            for c in 0..n {
                out.push(x[i * n + c] + sign * x[j * n + c]);
            }
        }
        out
    }

    fn arc_scatter(&self, y: &[f64], sign: f64) -> Vec<f64> {
        let n = self.block_dim;
        assert_eq!(y.len(), self.arcs.len() * n, "stacked arc vector length");
        let mut out = vec![0.0; self.agents() * n];
        for (q, &(i, j)) in self.arcs.iter().enumerate() {
            for c in 0..n {
                out[i * n + c] += y[q * n + c];
                out[j * n + c] += sign * y[q * n + c];
            }
        }
        out
    }
}

pub(crate) fn symmetric_eigen(
    m: &DMatrix<f64>,
) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, SpectralError> {
    let n = m.nrows();
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100 * n.max(10))
        .ok_or(SpectralError::NoConvergence(n))
}

/// Counts eigenvalues at or below `ZERO_EIGEN_REL × λ_max`.
pub fn zero_eigenvalue_count(m: &DMatrix<f64>) -> Result<usize, SpectralError> {
    let eig = symmetric_eigen(m)?;
    let top = eig.eigenvalues.amax();
    Ok(eig
        .eigenvalues
        .iter()
        .filter(|&&v| v <= ZERO_EIGEN_REL * top)
        .count())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GraphSpectra {
    pub lam_max_lplus: f64,
    /// Algebraic connectivity: smallest nonzero eigenvalue of `L₋`.
    pub lam_tmin_lminus: f64,
    pub sigma_max_mplus: f64,
    pub sigma_tmin_mminus: f64,
    pub kappa_g: f64,
}

impl GraphSpectra {
    pub fn from_eigenvalues(lam_max_lplus: f64, lam_tmin_lminus: f64) -> Self {
        GraphSpectra {
            lam_max_lplus,
            lam_tmin_lminus,
            sigma_max_mplus: (2.0 * lam_max_lplus).sqrt(),
            sigma_tmin_mminus: (2.0 * lam_tmin_lminus).sqrt(),
            kappa_g: (lam_max_lplus / lam_tmin_lminus).sqrt(),
        }
    }
}

pub fn spectra(inc: &IncidenceSet) -> Result<GraphSpectra, SpectralError> {
    let plus = symmetric_eigen(&inc.l_plus)?;
    let lam_max = plus.eigenvalues.max();
    let minus = symmetric_eigen(&inc.l_minus)?;
    let threshold = ZERO_EIGEN_REL * minus.eigenvalues.amax();
    let zeros = minus
        .eigenvalues
        .iter()
        .filter(|&&v| v <= threshold)
        .count();
    if zeros != 1 {
        return Err(SpectralError::NotConnected(zeros));
    }
    let lam_tmin = minus
        .eigenvalues
        .iter()
        .copied()
        .filter(|&v| v > threshold)
        .fold(f64::INFINITY, f64::min);
    Ok(GraphSpectra::from_eigenvalues(lam_max, lam_tmin))
}

/// Pseudo-inverse of `2·L₋` from its eigendecomposition, applied blockwise.
#[derive(Debug, Clone)]
pub struct SignedLaplacianPinv {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    threshold: f64,
    block_dim: usize,
}

impl SignedLaplacianPinv {
    pub fn new(inc: &IncidenceSet) -> Result<Self, SpectralError> {
        let eig = symmetric_eigen(&inc.l_minus)?;
        let threshold = ZERO_EIGEN_REL * eig.eigenvalues.amax();
        Ok(SignedLaplacianPinv {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            threshold,
            block_dim: inc.block_dim,
        })
    }

    /// `(2L₋ ⊗ I_N)† b`; the null-space component of `b` is dropped.
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let n = self.block_dim;
        let l = self.eigenvalues.len();
        assert_eq!(b.len(), l * n, "stacked agent vector length");
        let mut out = vec![0.0; l * n];
        for c in 0..n {
            let coord = DVector::from_fn(l, |i, _| b[i * n + c]);
            let coeffs = self.eigenvectors.tr_mul(&coord);
            let mut acc = DVector::zeros(l);
            for (k, &lam) in self.eigenvalues.iter().enumerate() {
                if lam > self.threshold {
                    acc.axpy(coeffs[k] / (2.0 * lam), &self.eigenvectors.column(k), 1.0);
                }
            }
            for i in 0..l {
                out[i * n + c] = acc[i];
            }
        }
        out
    }
}

/// One-shot `(2L₋)† b` for callers that do not reuse the decomposition.
pub fn pinv_apply_lminus(inc: &IncidenceSet, b: &[f64]) -> Result<Vec<f64>, SpectralError> {
    Ok(SignedLaplacianPinv::new(inc)?.apply(b))
}
