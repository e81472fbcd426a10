//! Matrix-form dynamics used to cross-check the client protocol.
//!
//! The protocol in [`crate::algorithms::fedcet`] never materializes the
//! correction variable `d(t)`. Here the iteration is written over stacked
//! `N × n` states `(x(t), d(t))`:
//!
//! ```text
//! d(t+1) = d(t) + c(I − W(t+1)) {x(t) − α∇f(t) − α d(t)}
//! x(t+1) = x(t) − α∇f(t) − α d(t+1)
//! ```
//!
//! with `W = (1/N)𝟙𝟙ᵀ` on communication steps and `W = I` otherwise. The
//! per-round map, fixed-point residuals and the Lyapunov monitor all operate
//! on this representation.

use ndarray::Array2;

use crate::algorithms::HyperParams;
use crate::error::{FedError, Result};
use crate::linalg::{
    center_project, frob_inner, weighted_norm_sq, ModelVec, StackedMat, WeightSpec,
};
use crate::loss::FederatedProblem;
use crate::lr_search::growth_factor;

/// Stacked iterate `x(t)` with its correction `d(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    pub x: StackedMat,
    pub d: StackedMat,
    pub t: i64,
}

impl StackedState {
    /// State at `t = −1`: `x(−1) = x(−2) − α∇f(x(−2))` and `d(−1) = 0`.
    /// One [`oracle_step`] from here performs the bootstrap exchange.
    pub fn bootstrap(
        problem: &FederatedProblem,
        hp: &HyperParams,
        x_init: &StackedMat,
    ) -> Result<Self> {
        let g = problem.stacked_gradient(x_init)?;
        let x = x_init - &(hp.alpha() * &g);
        Ok(StackedState {
            d: StackedMat::zeros(x.nrows(), x.ncols()),
            x,
            t: -1,
        })
    }

    /// `‖mean_i d_i‖∞`; zero for every reachable state.
    pub fn d_mean_inf(&self) -> f64 {
        self.d.column_mean().norm_inf()
    }
}

/// `(d*, x*)` with every row of `x*` equal to the optimum and `d*_i = −∇f_i(x*)`.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub optimum: ModelVec,
    pub x_star: StackedMat,
    pub d_star: StackedMat,
}

impl FixedPoint {
    pub fn from_optimum(problem: &FederatedProblem, optimum: ModelVec) -> Result<Self> {
        let x_star = StackedMat::broadcast(&optimum, problem.num_clients());
        let d_star = -1.0 * &problem.stacked_gradient(&x_star)?;
        Ok(FixedPoint {
            optimum,
            x_star,
            d_star,
        })
    }

    pub fn for_problem(problem: &FederatedProblem) -> Result<Self> {
        Self::from_optimum(problem, problem.optimum())
    }

    pub fn as_state(&self, t: i64) -> StackedState {
        StackedState {
            x: self.x_star.clone(),
            d: self.d_star.clone(),
            t,
        }
    }
}

fn is_comm_step(t_next: i64, tau: u32) -> bool {
    t_next.rem_euclid(tau as i64) == 0
}

/// One iteration `t → t+1` of the matrix-form dynamics.
pub fn oracle_step(
    s: &StackedState,
    problem: &FederatedProblem,
    hp: &HyperParams,
) -> Result<StackedState> {
    let alpha = hp.alpha();
    let grad = problem.stacked_gradient(&s.x)?;
    let descent = &s.x - &(alpha * &grad);
    let d = if is_comm_step(s.t + 1, hp.tau()) {
        let inner = &descent - &(alpha * &s.d);
        &s.d + &(hp.c() * &center_project(&inner))
    } else {
        s.d.clone()
    };
    let x = &descent - &(alpha * &d);
    Ok(StackedState { x, d, t: s.t + 1 })
}

/// One round map `τk → τk+τ` together with the drift terms
/// `A(k) = (τ−1)α∇f(τk) − α Σ_{h=1}^{τ−1} ∇f(τk+h)` and
/// `B(k) = (τ−1)α (d(τk+τ) − d(τk))`.
#[derive(Debug, Clone)]
pub struct RoundTerms {
    pub a: StackedMat,
    pub b: StackedMat,
    pub next: StackedState,
}

pub fn oracle_round_terms(
    s: &StackedState,
    problem: &FederatedProblem,
    hp: &HyperParams,
) -> Result<RoundTerms> {
    let tau = hp.tau();
    if tau == 0 {
        return Err(FedError::config("tau must be >= 1"));
    }
    if s.t < 0 || s.t % tau as i64 != 0 {
        return Err(FedError::Invariant(format!(
            "round map needs a round boundary, got t = {} with tau = {tau}",
            s.t
        )));
    }
    let alpha = hp.alpha();
    let t = tau as f64;

    // Inside a round d is frozen, so the intermediate iterates follow plain
    // corrected descent and only their gradients are needed.
    let grad0 = problem.stacked_gradient(&s.x)?;
    let mut x = s.x.as_array().clone();
    let mut g = grad0.as_array().clone();
    let mut later_grads = Array2::<f64>::zeros(x.dim());
    for _ in 1..tau {
        x = &x - &(&g * alpha) - &(s.d.as_array() * alpha);
        g = problem.stacked_gradient_raw(&x);
        later_grads += &g;
    }
    let a = StackedMat::from_array_unchecked(
        grad0.as_array() * ((t - 1.0) * alpha) - &(later_grads * alpha),
    );

    let inner = &(&s.x - &((t * alpha) * &grad0)) - &(&((t * alpha) * &s.d) - &a);
    let d_next = &s.d + &(hp.c() * &center_project(&inner));
    let b = ((t - 1.0) * alpha) * &(&d_next - &s.d);
    let x_next = &(&(&s.x - &((t * alpha) * &grad0)) - &((t * alpha) * &d_next)) + &(&a + &b);
    Ok(RoundTerms {
        a,
        b,
        next: StackedState {
            x: x_next,
            d: d_next,
            t: s.t + tau as i64,
        },
    })
}

pub fn oracle_round(
    s: &StackedState,
    problem: &FederatedProblem,
    hp: &HyperParams,
) -> Result<StackedState> {
    Ok(oracle_round_terms(s, problem, hp)?.next)
}

/// `(‖(I − (1/N)𝟙𝟙ᵀ)x‖, ‖d + ∇f(x)‖)`; both vanish exactly at the fixed point.
pub fn fixed_point_residual(s: &StackedState, problem: &FederatedProblem) -> Result<(f64, f64)> {
    let consensus = center_project(&s.x).frob_norm();
    let grad = problem.stacked_gradient(&s.x)?;
    Ok((consensus, (&s.d + &grad).frob_norm()))
}

/// `e = ‖(1/N) Σ x_i − x*‖`.
pub fn convergence_error(s: &StackedState, optimum: &ModelVec) -> f64 {
    s.x.column_mean().distance(optimum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovSample {
    pub k: i64,
    pub v: f64,
    pub term_x: f64,
    pub term_d: f64,
}

/// Weights of the Lyapunov function: `(1 − τμα)/(τα)` on the model error and
/// the eigenvalue `c⁻¹ − α + (1 − τμα)τα` of `M₁` on the centered subspace.
pub fn lyapunov_weights(hp: &HyperParams) -> (f64, f64) {
    let t = hp.tau() as f64;
    let a = hp.alpha();
    let shrink = 1.0 - t * hp.mu() * a;
    (shrink / (t * a), 1.0 / hp.c() - a + shrink * t * a)
}

/// `V = (1 − τμα)‖x − x*‖²_{(ταI)⁻¹} + ‖d − d*‖²_{M₁}`.
pub fn lyapunov(s: &StackedState, fp: &FixedPoint, hp: &HyperParams) -> Result<LyapunovSample> {
    let dd = &s.d - &fp.d_star;
    let drift = dd.column_mean().norm_inf();
    if drift > 1e-9 {
        return Err(FedError::Invariant(format!(
            "d − d* is not centered (client mean {drift:e})"
        )));
    }
    let (wx, wd) = lyapunov_weights(hp);
    let term_x = weighted_norm_sq(&(&s.x - &fp.x_star), WeightSpec::identity_scaled(wx)?)?;
    // M₁ is a·I + c⁻¹P with a possibly negative for τ = 1; on centered input
    // only the eigenvalue a + c⁻¹ matters.
    let term_d = weighted_norm_sq(&center_project(&dd), WeightSpec::centering(0.0, wd)?)?;
    Ok(LyapunovSample {
        k: s.t.div_euclid(hp.tau() as i64),
        v: term_x + term_d,
        term_x,
        term_d,
    })
}

/// Upper bound on `‖x(τk) − x*‖²` after `k` rounds at rate `rho`, given the
/// initial model error `dist_sq0` and initial `‖d(0) − d*‖²_{M₁}`.
pub fn model_error_envelope(
    hp: &HyperParams,
    rho: f64,
    k: u64,
    dist_sq0: f64,
    term_d0: f64,
) -> f64 {
    let t = hp.tau() as f64;
    let a = hp.alpha();
    let scale = t * a / (1.0 - t * hp.mu() * a);
    rho.powf(k as f64) * (dist_sq0 + scale * term_d0)
}

/// Measured `‖A(k) + B(k)‖²_{(ταI)⁻¹}` and its a-priori bound
/// `2ατ‖Δd‖² + B₁L⁴α³‖x − x*‖² + B₁L²α³‖d − d*‖²`, `B₁ = τ³(1 + 2/τ)^(2τ−2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftBound {
    pub measured: f64,
    pub bound: f64,
}

pub fn drift_bound(
    before: &StackedState,
    terms: &RoundTerms,
    fp: &FixedPoint,
    hp: &HyperParams,
) -> Result<DriftBound> {
    let t = hp.tau() as f64;
    let a = hp.alpha();
    let l = hp.l();
    let ab = &terms.a + &terms.b;
    let measured = frob_inner(&ab, &ab, WeightSpec::identity_scaled(1.0 / (t * a))?)?;
    let b1 = t.powi(3) * growth_factor(hp.tau());
    let dd = (&terms.next.d - &before.d).frob_norm().powi(2);
    let dx = (&before.x - &fp.x_star).frob_norm().powi(2);
    let dstar = (&before.d - &fp.d_star).frob_norm().powi(2);
    let bound = 2.0 * a * t * dd + b1 * l.powi(4) * a.powi(3) * dx + b1 * l * l * a.powi(3) * dstar;
    Ok(DriftBound { measured, bound })
}
