//! Learning-rate search and the contraction-rate predictors.
//!
//! The search starts strictly below a closed-form bound that is known to be
//! feasible and walks `α` upward in steps of `h` while both feasibility guards
//! hold. The guards are algebraically equivalent to `ρ₂ < 1` and `ρ₁ < 1`
//! respectively, so the returned `α` always comes with a strict contraction
//! factor `ρ = max(ρ₁, ρ₂) < 1`.

use serde::Serialize;

use crate::error::{FedError, Result};

/// `(1 + 2/τ)^(2τ−2)`, the local-drift amplification over one round.
pub fn growth_factor(tau: u32) -> f64 {
    let t = tau as f64;
    (1.0 + 2.0 / t).powi(2 * tau as i32 - 2)
}

fn check_positive(mu: f64, l: f64, tau: u32) -> Result<()> {
    if !(mu.is_finite() && l.is_finite() && mu > 0.0 && l > 0.0) || tau == 0 {
        return Err(FedError::Input(format!(
            "need mu > 0, L > 0, tau >= 1; got mu={mu}, L={l}, tau={tau}"
        )));
    }
    Ok(())
}

/// Exclusive upper bound for the starting learning rate:
/// `min{1/(2τL), μ²/(2τGL³), μ/(5τGL²)}` with `G = growth_factor(τ)`.
pub fn initial_bound(mu: f64, l: f64, tau: u32) -> Result<f64> {
    check_positive(mu, l, tau)?;
    let t = tau as f64;
    let g = growth_factor(tau);
    let b1 = 1.0 / (2.0 * t * l);
    let b2 = mu * mu / (2.0 * t * g * l.powi(3));
    let b3 = mu / (5.0 * t * g * l * l);
    Ok(b1.min(b2).min(b3))
}

/// `1 − τμα + τL²(τα − 2/μ)Gα`.
pub fn guard_c1(alpha: f64, mu: f64, l: f64, tau: u32) -> f64 {
    let t = tau as f64;
    1.0 - t * mu * alpha + t * l * l * (t * alpha - 2.0 / mu) * growth_factor(tau) * alpha
}

/// `(1 − τLα)τμα + τ³L⁴(τα − 2/μ)Gα³`.
pub fn guard_c2(alpha: f64, mu: f64, l: f64, tau: u32) -> f64 {
    let t = tau as f64;
    (1.0 - t * l * alpha) * t * mu * alpha
        + t.powi(3) * l.powi(4) * (t * alpha - 2.0 / mu) * growth_factor(tau) * alpha.powi(3)
}

pub fn condition_c1(alpha: f64, mu: f64, l: f64, tau: u32) -> bool {
    guard_c1(alpha, mu, l, tau) > 0.0
}

pub fn condition_c2(alpha: f64, mu: f64, l: f64, tau: u32) -> bool {
    guard_c2(alpha, mu, l, tau) > 0.0
}

/// Largest admissible weight parameter, `μ/(2μα + 8)`.
pub fn c_max(alpha: f64, mu: f64) -> f64 {
    mu / (2.0 * mu * alpha + 8.0)
}

/// Eigenvalue of `M = c⁻¹P − αI` on the centered subspace.
pub fn lambda_max_m(alpha: f64, c: f64) -> f64 {
    1.0 / c - alpha
}

/// `B₂ = τ²G`.
fn b2(tau: u32) -> f64 {
    (tau as f64).powi(2) * growth_factor(tau)
}

/// Contraction factor of the model term. Infinite when `1 − τμα ≤ 0`, where
/// the Lyapunov weighting is undefined.
pub fn rho1(alpha: f64, mu: f64, l: f64, tau: u32) -> f64 {
    let t = tau as f64;
    let denom = 1.0 - t * mu * alpha;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    let num = 1.0 - (2.0 - t * alpha * l) * t * mu * alpha
        + (2.0 / (t * mu * alpha) - 1.0) * b2(tau) * t * t * alpha.powi(4) * l.powi(4);
    num / denom
}

/// Contraction factor of the correction term, given `λ_max{M}`.
pub fn rho2(alpha: f64, mu: f64, l: f64, tau: u32, lambda_max: f64) -> f64 {
    let t = tau as f64;
    let num =
        lambda_max + (2.0 / (t * mu * alpha) - 1.0) * b2(tau) * alpha * alpha * l * l * t * alpha;
    let denom = lambda_max + (1.0 - t * mu * alpha) * t * alpha;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    num / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateReport {
    pub alpha: f64,
    pub c: f64,
    pub c_max: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub rho: f64,
}

impl RateReport {
    /// Rates at `alpha` with weight parameter `c`.
    pub fn at(alpha: f64, c: f64, mu: f64, l: f64, tau: u32) -> Self {
        let r1 = rho1(alpha, mu, l, tau);
        let r2 = rho2(alpha, mu, l, tau, lambda_max_m(alpha, c));
        RateReport {
            alpha,
            c,
            c_max: c_max(alpha, mu),
            rho1: r1,
            rho2: r2,
            rho: r1.max(r2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub mu: f64,
    pub l: f64,
    pub tau: u32,
    /// Search stepsize `h`.
    pub step: f64,
    pub alpha0_override: Option<f64>,
}

impl SearchConfig {
    /// `h = frac · α₀` with the default `α₀ = 0.999 · initial_bound`.
    pub fn with_step_fraction(mu: f64, l: f64, tau: u32, frac: f64) -> Result<Self> {
        if !(frac.is_finite() && frac > 0.0) {
            return Err(FedError::config(format!(
                "step fraction must be > 0, got {frac}"
            )));
        }
        let alpha0 = default_alpha0(mu, l, tau)?;
        Ok(SearchConfig {
            mu,
            l,
            tau,
            step: frac * alpha0,
            alpha0_override: None,
        })
    }

    fn alpha0(&self, bound: f64) -> Result<f64> {
        match self.alpha0_override {
            None => Ok(0.999 * bound),
            Some(a) if a > 0.0 && a < bound => Ok(a),
            Some(a) => Err(FedError::config(format!(
                "alpha0 = {a} must lie in (0, {bound})"
            ))),
        }
    }
}

pub fn default_alpha0(mu: f64, l: f64, tau: u32) -> Result<f64> {
    Ok(0.999 * initial_bound(mu, l, tau)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub initial_bound: f64,
    pub alpha0: f64,
    pub step: f64,
    /// Number of accepted increments.
    pub increments: u64,
    pub report: RateReport,
}

/// Linear scan: `α ← α + h` while both guards hold, then step back once.
/// The reported rates use `c = c_max(α, μ)`.
pub fn search(cfg: &SearchConfig) -> Result<SearchOutcome> {
    let bound = initial_bound(cfg.mu, cfg.l, cfg.tau)?;
    if !(cfg.step.is_finite() && cfg.step > 0.0) || cfg.step >= bound {
        return Err(FedError::config(format!(
            "search step h = {} must lie in (0, {bound})",
            cfg.step
        )));
    }
    let alpha0 = cfg.alpha0(bound)?;
    let feasible =
        |a: f64| condition_c1(a, cfg.mu, cfg.l, cfg.tau) && condition_c2(a, cfg.mu, cfg.l, cfg.tau);
    if !feasible(alpha0) {
        return Err(FedError::config(format!(
            "alpha0 = {alpha0} already violates a guard"
        )));
    }

    // Both guards fail on (2/(τL), 2/(τL) + h], so the scan ends within this many steps.
    let limit = ((2.0 / (cfg.tau as f64 * cfg.l) - alpha0) / cfg.step).ceil() as u64 + 2;
    // `alpha + h` is evaluated exactly once per step, so the returned α plus
    // `h` reproduces the rejected candidate bit for bit.
    let mut alpha = alpha0;
    let mut increments = 0u64;
    loop {
        let next = alpha + cfg.step;
        if !feasible(next) {
            break;
        }
        alpha = next;
        increments += 1;
        if increments > limit {
            return Err(FedError::config(
                "learning-rate search did not terminate".to_string(),
            ));
        }
    }
    let c = c_max(alpha, cfg.mu);
    Ok(SearchOutcome {
        initial_bound: bound,
        alpha0,
        step: cfg.step,
        increments,
        report: RateReport::at(alpha, c, cfg.mu, cfg.l, cfg.tau),
    })
}
