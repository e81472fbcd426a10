//! Federated algorithms behind a common per-round interface.

pub mod fedavg;
pub mod fedcet;
pub mod scaffold;

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::loss::{FederatedProblem, LossConstants};
use crate::lr_search::c_max;
use crate::oracle::{FixedPoint, LyapunovSample, StackedState};

pub use fedavg::{fedavg_round, FedAvg};
pub use fedcet::{
    fedcet_comm_round, fedcet_init, fedcet_iterates, fedcet_local_step, fedcet_run, mix_payloads,
    CommOutcome, DownlinkMsg, FedCet, FedCetClientState, UplinkMsg,
};
pub use scaffold::{scaffold_round, Scaffold, ScaffoldState};

/// Any iterate with an entry beyond this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Validated FedCET hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    num_clients: usize,
    dim: usize,
    tau: u32,
    alpha: f64,
    c: f64,
    constants: LossConstants,
}

impl HyperParams {
    /// Requires `τ ≥ 1`, `0 < c ≤ μ/(2μα + 8)`, `αL < 2/τ` and `τμα < 1`.
    pub fn new(
        num_clients: usize,
        dim: usize,
        tau: u32,
        alpha: f64,
        c: f64,
        constants: LossConstants,
    ) -> Result<Self> {
        if num_clients == 0 || dim == 0 {
            return Err(FedError::config(format!(
                "need at least one client and dimension, got N={num_clients}, n={dim}"
            )));
        }
        if tau == 0 {
            return Err(FedError::config("tau must be >= 1"));
        }
        let (l, mu) = (constants.smoothness(), constants.strong_convexity());
        let t = tau as f64;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(FedError::config(format!("alpha must be > 0, got {alpha}")));
        }
        if alpha * l >= 2.0 / t {
            return Err(FedError::config(format!(
                "alpha * L = {} must be below 2/tau = {}",
                alpha * l,
                2.0 / t
            )));
        }
        if t * mu * alpha >= 1.0 {
            return Err(FedError::config(format!(
                "tau * mu * alpha = {} must be below 1",
                t * mu * alpha
            )));
        }
        let cap = c_max(alpha, mu);
        if !(c.is_finite() && c > 0.0 && c <= cap) {
            return Err(FedError::config(format!("c = {c} must lie in (0, {cap}]")));
        }
        Ok(HyperParams {
            num_clients,
            dim,
            tau,
            alpha,
            c,
            constants,
        })
    }

    /// Same as [`HyperParams::new`] with `c = c_max(α, μ)`.
    pub fn with_default_c(
        num_clients: usize,
        dim: usize,
        tau: u32,
        alpha: f64,
        constants: LossConstants,
    ) -> Result<Self> {
        let c = c_max(alpha, constants.strong_convexity());
        Self::new(num_clients, dim, tau, alpha, c, constants)
    }

    pub fn for_problem(
        problem: &FederatedProblem,
        tau: u32,
        alpha: f64,
        c: Option<f64>,
    ) -> Result<Self> {
        let k = problem.constants();
        let c = c.unwrap_or_else(|| c_max(alpha, k.strong_convexity()));
        Self::new(problem.num_clients(), problem.dim(), tau, alpha, c, k)
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> u32 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn l(&self) -> f64 {
        self.constants.smoothness()
    }

    pub fn mu(&self) -> f64 {
        self.constants.strong_convexity()
    }

    pub(crate) fn check_problem(&self, problem: &FederatedProblem) -> Result<()> {
        if problem.num_clients() != self.num_clients || problem.dim() != self.dim {
            return Err(FedError::dim(format!(
                "hyperparameters are for {}x{}, problem is {}x{}",
                self.num_clients,
                self.dim,
                problem.num_clients(),
                problem.dim()
            )));
        }
        Ok(())
    }
}

/// How server-to-client traffic is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownlinkMode {
    /// One vector per broadcast regardless of `N`.
    #[default]
    Broadcast,
    /// One copy per client.
    Unicast,
}

impl DownlinkMode {
    pub fn scalars(self, payload_len: usize, num_clients: usize) -> u64 {
        match self {
            DownlinkMode::Broadcast => payload_len as u64,
            DownlinkMode::Unicast => (payload_len * num_clients) as u64,
        }
    }
}

/// Scalars moved in one exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Traffic {
    pub up: u64,
    pub down: u64,
}

impl Add for Traffic {
    type Output = Traffic;

    fn add(self, rhs: Traffic) -> Traffic {
        Traffic {
            up: self.up + rhs.up,
            down: self.down + rhs.down,
        }
    }
}

impl AddAssign for Traffic {
    fn add_assign(&mut self, rhs: Traffic) {
        *self = *self + rhs;
    }
}

/// A federated algorithm driven one communication round at a time.
///
/// `bootstrap` performs the round-0 exchange; every later call to `round`
/// advances to the next round boundary. Both report the scalars they moved.
pub trait RoundAlgorithm {
    fn name(&self) -> &'static str;

    fn bootstrap(&mut self, problem: &FederatedProblem) -> Result<Traffic>;

    fn round(&mut self, problem: &FederatedProblem) -> Result<Traffic>;

    /// Iteration index `t` of the current round boundary.
    fn iteration(&self) -> i64;

    /// Stacked view `(x, d)` at the current boundary. For the baselines `d` is
    /// the drift correction the method effectively applies, so that
    /// `d + ∇f(x)` vanishes exactly at the optimum.
    fn snapshot(&self, problem: &FederatedProblem) -> Result<StackedState>;

    fn lyapunov(&self, _state: &StackedState, _fp: &FixedPoint) -> Result<Option<LyapunovSample>> {
        Ok(None)
    }
}

pub(crate) fn guard_divergence(magnitude: f64, iteration: i64) -> Result<()> {
    if magnitude.is_finite() && magnitude <= DIVERGENCE_LIMIT {
        Ok(())
    } else {
        Err(FedError::Divergence {
            iteration,
            magnitude,
        })
    }
}
