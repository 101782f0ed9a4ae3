//! Linear-rate certificate and empirical rate statistics.
//!
//! The contraction constant for a free parameter `μ > 1` and penalty `c` is
//!
//! ```text
//! δ(μ, c) = min{ (μ−1)·σ̃²_min(M₋) / (μ·σ²_max(M₊)),
//!                m_f / ( (c/4)·σ²_max(M₊) + (μ/c)·M_f²·σ̃⁻²_min(M₋) ) }
//! ```
//!
//! and `‖u^{k+1} − u*‖²_G ≤ ‖u^k − u*‖²_G / (1 + δ)`. Choosing `c = c_t(μ)`
//! maximizes the second term for fixed `μ`; choosing `μ = μ*` equalizes the
//! two terms, which gives the closed-form `δ_t(κ_f, κ_G)`.

use serde::Serialize;
use thiserror::Error;

use crate::objectives::ObjectiveProfile;
use crate::spectral::GraphSpectra;

#[derive(Debug, Error, PartialEq)]
pub enum RateError {
    #[error("free parameter μ = {0} must exceed 1")]
    MuOutOfRange(f64),
    #[error("penalty c = {0} must be positive")]
    PenaltyOutOfRange(f64),
    #[error(
        "condition numbers out of domain: κ_f = {kappa_f} (need ≥ 1), κ_G = {kappa_g} (need > 0)"
    )]
    ConditionOutOfRange { kappa_f: f64, kappa_g: f64 },
    #[error("error series is empty")]
    EmptySeries,
    #[error("initial error must be positive, got {0}")]
    NonPositiveStart(f64),
}

fn check_conditions(kappa_f: f64, kappa_g: f64) -> Result<(), RateError> {
    if kappa_f >= 1.0 && kappa_g > 0.0 && kappa_f.is_finite() && kappa_g.is_finite() {
        Ok(())
    } else {
        Err(RateError::ConditionOutOfRange { kappa_f, kappa_g })
    }
}

/// The two arguments of the minimum defining δ(μ, c).
pub fn delta_terms(
    mu: f64,
    c: f64,
    spectra: &GraphSpectra,
    profile: &ObjectiveProfile,
) -> Result<(f64, f64), RateError> {
    if !(mu > 1.0) {
        return Err(RateError::MuOutOfRange(mu));
    }
    if !(c > 0.0) {
        return Err(RateError::PenaltyOutOfRange(c));
    }
    let s_max2 = spectra.sigma_max_mplus.powi(2);
    let s_min2 = spectra.sigma_tmin_mminus.powi(2);
    let graph_term = (mu - 1.0) * s_min2 / (mu * s_max2);
    let objective_term =
        profile.m_f / (c / 4.0 * s_max2 + mu / c * profile.big_m_f.powi(2) / s_min2);
    Ok((graph_term, objective_term))
}

pub fn delta(
    mu: f64,
    c: f64,
    spectra: &GraphSpectra,
    profile: &ObjectiveProfile,
) -> Result<f64, RateError> {
    delta_terms(mu, c, spectra, profile).map(|(a, b)| a.min(b))
}

/// Penalty maximizing δ for a fixed μ: `2·√μ·M_f / (σ_max(M₊)·σ̃_min(M₋))`.
pub fn penalty_for_mu(mu: f64, spectra: &GraphSpectra, big_m_f: f64) -> f64 {
    2.0 * mu.sqrt() * big_m_f / (spectra.sigma_max_mplus * spectra.sigma_tmin_mminus)
}

/// Optimal free parameter.
///
/// With `r = κ_G/κ_f` the defining expression is
/// `μ⁻¹ = 1 + r²/2 − (r/2)·√(r² + 4)`; multiplying through by the conjugate
/// gives the cancellation-free form `μ = 1 + r²/2 + (r/2)·√(r² + 4)`.
pub fn mu_star(kappa_f: f64, kappa_g: f64) -> Result<f64, RateError> {
    check_conditions(kappa_f, kappa_g)?;
    let r = kappa_g / kappa_f;
    Ok(1.0 + 0.5 * r * r + 0.5 * r * (r * r + 4.0).sqrt())
}

/// Maximal contraction constant
/// `δ_t = (1/(2κ_f))·√(1/κ_f² + 4/κ_G²) − 1/(2κ_f²)`,
/// evaluated as `(1/(2κ_f))·b² / (√(a² + b²) + a)` with `a = 1/κ_f`, `b = 2/κ_G`.
pub fn delta_t(kappa_f: f64, kappa_g: f64) -> Result<f64, RateError> {
    check_conditions(kappa_f, kappa_g)?;
    let a = 1.0 / kappa_f;
    let b = 2.0 / kappa_g;
    Ok(0.5 / kappa_f * b * b / ((a * a + b * b).sqrt() + a))
}

pub fn rate_from_delta(delta: f64) -> f64 {
    (1.0 / (1.0 + delta)).sqrt()
}

pub fn c_t(spectra: &GraphSpectra, profile: &ObjectiveProfile) -> Result<f64, RateError> {
    let mu = mu_star(profile.kappa_f, spectra.kappa_g)?;
    Ok(penalty_for_mu(mu, spectra, profile.big_m_f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateBundle {
    pub kappa_g: f64,
    pub kappa_f: f64,
    pub c_t: f64,
    pub mu_star: f64,
    pub delta_t: f64,
    pub rho_t: f64,
}

impl RateBundle {
    pub fn new(spectra: &GraphSpectra, profile: &ObjectiveProfile) -> Result<Self, RateError> {
        let mu = mu_star(profile.kappa_f, spectra.kappa_g)?;
        let dt = delta_t(profile.kappa_f, spectra.kappa_g)?;
        Ok(RateBundle {
            kappa_g: spectra.kappa_g,
            kappa_f: profile.kappa_f,
            c_t: penalty_for_mu(mu, spectra, profile.big_m_f),
            mu_star: mu,
            delta_t: dt,
            rho_t: rate_from_delta(dt),
        })
    }
}

/// Per-step and running geometric-average rates of an error series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    /// `ρ_k = e_k / e_{k−1}` for `k = 1..=K`.
    pub rho_k: Vec<f64>,
    /// `ρ̄_k = (e_k / e_0)^{1/k}` for `k = 1..=K`.
    pub rho_bar_k: Vec<f64>,
    /// `ρ̄_K`, or NaN when the series has a single entry.
    pub rho_bar: f64,
    pub iterations: usize,
    pub terminal_error: f64,
}

/// Rates of `errors[k] = ‖x^k − x*‖`. The series is cut after the first exact
/// zero, where ratios stop being defined.
pub fn empirical_rates(errors: &[f64]) -> Result<RateReport, RateError> {
    let &first = errors.first().ok_or(RateError::EmptySeries)?;
    if !(first > 0.0) {
        return Err(RateError::NonPositiveStart(first));
    }
    let end = errors
        .iter()
        .position(|&e| e == 0.0)
        .map_or(errors.len(), |z| z + 1);
    let errors = &errors[..end];
    let rho_k: Vec<f64> = errors.windows(2).map(|w| w[1] / w[0]).collect();
    let rho_bar_k: Vec<f64> = errors
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, e)| (e / first).powf(1.0 / k as f64))
        .collect();
    Ok(RateReport {
        rho_bar: rho_bar_k.last().copied().unwrap_or(f64::NAN),
        iterations: errors.len() - 1,
        terminal_error: errors[errors.len() - 1],
        rho_k,
        rho_bar_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(m_f: f64, big_m_f: f64) -> ObjectiveProfile {
        ObjectiveProfile {
            m_f,
            big_m_f,
            kappa_f: big_m_f / m_f,
        }
    }

    /// Single edge: both Laplacians have nonzero eigenvalue 2, so σ = 2.
    fn single_edge() -> GraphSpectra {
        GraphSpectra::from_eigenvalues(2.0, 2.0)
    }

    #[test]
    fn delta_single_edge_terms() {
        // Graph term (1/2)(4/4) = 1/2; objective term 1/(c·4/4 + μ/c·1/4) = 1/(1 + 1/2) = 2/3.
        let (a, b) = delta_terms(2.0, 1.0, &single_edge(), &profile(1.0, 1.0)).unwrap();
        assert!((a - 0.5).abs() < 1e-15);
        assert!((b - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            delta(2.0, 1.0, &single_edge(), &profile(1.0, 1.0)).unwrap(),
            0.5
        );
    }

    #[test]
    fn delta_vanishes_as_mu_approaches_one() {
        let d = delta(1.0 + 1e-9, 1.0, &single_edge(), &profile(1.0, 1.0)).unwrap();
        assert!(d > 0.0 && d < 2e-9);
    }

    #[test]
    fn delta_rejects_bad_arguments() {
        let (s, p) = (single_edge(), profile(1.0, 1.0));
        assert_eq!(delta(1.0, 1.0, &s, &p), Err(RateError::MuOutOfRange(1.0)));
        assert_eq!(
            delta(2.0, 0.0, &s, &p),
            Err(RateError::PenaltyOutOfRange(0.0))
        );
        assert!(mu_star(0.5, 1.0).is_err());
        assert!(delta_t(1.0, 0.0).is_err());
    }

    #[test]
    fn penalty_examples() {
        assert!((penalty_for_mu(4.0, &single_edge(), 1.0) - 1.0).abs() < 1e-15);
        let p1 = c_t(&single_edge(), &profile(1.0, 2.0)).unwrap();
        let p3 = c_t(&single_edge(), &profile(3.0, 6.0)).unwrap();
        assert!((p3 / p1 - 3.0).abs() < 1e-14);
    }

    #[test]
    fn mu_star_golden_ratio_and_limits() {
        let mu = mu_star(1.0, 1.0).unwrap();
        assert!((mu - (1.0 + (1.0 + 5f64.sqrt()) / 2.0)).abs() < 1e-14);
        let literal = 1.0 / (1.0 + 0.5 - 0.5 * 5f64.sqrt());
        assert!((mu - literal).abs() < 1e-12);
        assert!(mu_star(1.0, 1e-9).unwrap() > 1.0);
        assert!(mu_star(1.0, 1e-9).unwrap() - 1.0 < 1e-8);
    }

    #[test]
    fn delta_t_closed_form_values() {
        let d = delta_t(1.0, 1.0).unwrap();
        assert!((d - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-15);
        assert!((rate_from_delta(d) - 0.786151377757).abs() < 1e-11);
        assert!(delta_t(1e8, 1.0).unwrap() < 2e-8);
        assert!(delta_t(1.0, 1e8).unwrap() < 1e-15);
        for kg in [0.5, 1.0, 5.0, 50.0] {
            assert!(delta_t(1.0, kg).unwrap() > delta_t(2.0, kg).unwrap());
        }
    }

    #[test]
    fn delta_t_matches_literal_formula_where_stable() {
        for (kf, kg) in [(1.0f64, 1.0f64), (3.0, 2.0), (10.0, 1.5), (2.0, 7.0)] {
            let literal = 0.5 / kf * (1.0 / (kf * kf) + 4.0 / (kg * kg)).sqrt() - 0.5 / (kf * kf);
            assert!((delta_t(kf, kg).unwrap() - literal).abs() < 1e-14 * literal.max(1.0));
        }
    }

    #[test]
    fn bundle_fields_are_consistent() {
        let s = GraphSpectra::from_eigenvalues(398.0, 200.0);
        let b = RateBundle::new(&s, &profile(0.1, 2.0)).unwrap();
        assert!(b.mu_star > 1.0 && b.delta_t > 0.0 && b.rho_t > 0.0 && b.rho_t < 1.0);
        assert_eq!(b.rho_t, rate_from_delta(b.delta_t));
        let d = delta(b.mu_star, b.c_t, &s, &profile(0.1, 2.0)).unwrap();
        assert!((d - b.delta_t).abs() < 1e-12 * b.delta_t);
    }

    #[test]
    fn geometric_series_rates() {
        let errs: Vec<f64> = (0..20).map(|k| 0.9f64.powi(k)).collect();
        let r = empirical_rates(&errs).unwrap();
        assert!(r.rho_k.iter().all(|v| (v - 0.9).abs() < 1e-14));
        assert!(r.rho_bar_k.iter().all(|v| (v - 0.9).abs() < 1e-14));
        assert_eq!(r.iterations, 19);
    }

    #[test]
    fn hand_example_rates() {
        let r = empirical_rates(&[1.0, 0.5, 0.5]).unwrap();
        assert_eq!(r.rho_k, vec![0.5, 1.0]);
        assert!((r.rho_bar - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.terminal_error, 0.5);
    }

    #[test]
    fn degenerate_series() {
        assert_eq!(empirical_rates(&[]), Err(RateError::EmptySeries));
        assert_eq!(
            empirical_rates(&[0.0, 1.0]),
            Err(RateError::NonPositiveStart(0.0))
        );
        let single = empirical_rates(&[2.0]).unwrap();
        assert!(single.rho_bar.is_nan() && single.iterations == 0);
        let cut = empirical_rates(&[1.0, 0.1, 0.0, 0.0]).unwrap();
        assert_eq!(cut.iterations, 2);
        assert_eq!(cut.rho_k, vec![0.1, 0.0]);
    }
}
