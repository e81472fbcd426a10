//! Federated averaging with a constant local step.

use ndarray::Array1;

use crate::algorithms::{guard_divergence, DownlinkMode, RoundAlgorithm, Traffic};
use crate::error::{FedError, Result};
use crate::linalg::{center_project, ModelVec, StackedMat};
use crate::loss::FederatedProblem;
use crate::oracle::StackedState;

/// Broadcast `model`, run `tau` local gradient steps on every client, average.
pub fn fedavg_round(
    model: &ModelVec,
    problem: &FederatedProblem,
    tau: u32,
    alpha_local: f64,
) -> Result<ModelVec> {
    if model.len() != problem.dim() {
        return Err(FedError::dim(format!(
            "model has length {}, problem dimension is {}",
            model.len(),
            problem.dim()
        )));
    }
    let n = problem.dim();
    let mut sum = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(n);
    for loss in problem.losses() {
        let mut y = model.as_array().clone();
        for _ in 0..tau {
            loss.gradient_into(y.view(), g.view_mut());
            y.scaled_add(-alpha_local, &g);
        }
        sum += &y;
    }
    sum /= problem.num_clients() as f64;
    Ok(ModelVec::from_array_unchecked(sum))
}

#[derive(Debug, Clone)]
pub struct FedAvg {
    tau: u32,
    alpha_local: f64,
    x_init: StackedMat,
    downlink: DownlinkMode,
    model: Option<ModelVec>,
    rounds: i64,
}

impl FedAvg {
    pub fn new(
        tau: u32,
        alpha_local: f64,
        x_init: StackedMat,
        downlink: DownlinkMode,
    ) -> Result<Self> {
        if tau == 0 {
            return Err(FedError::config("tau must be >= 1"));
        }
        if !(alpha_local.is_finite() && alpha_local > 0.0) {
            return Err(FedError::config(format!(
                "FedAvg learning rate must be > 0, got {alpha_local}"
            )));
        }
        Ok(FedAvg {
            tau,
            alpha_local,
            x_init,
            downlink,
            model: None,
            rounds: 0,
        })
    }

    /// `1/(2τL)`.
    pub fn default_lr(tau: u32, l: f64) -> f64 {
        1.0 / (2.0 * tau as f64 * l)
    }

    pub fn model(&self) -> Option<&ModelVec> {
        self.model.as_ref()
    }

    fn traffic(&self, problem: &FederatedProblem) -> Traffic {
        Traffic {
            up: (problem.num_clients() * problem.dim()) as u64,
            down: self.downlink.scalars(problem.dim(), problem.num_clients()),
        }
    }
}

impl RoundAlgorithm for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    /// Round 0: clients upload their initial models and receive the average.
    fn bootstrap(&mut self, problem: &FederatedProblem) -> Result<Traffic> {
        if self.x_init.nrows() != problem.num_clients() || self.x_init.ncols() != problem.dim() {
            return Err(FedError::dim("initial iterate does not match the problem"));
        }
        self.model = Some(self.x_init.column_mean());
        self.rounds = 0;
        Ok(self.traffic(problem))
    }

    fn round(&mut self, problem: &FederatedProblem) -> Result<Traffic> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| FedError::Invariant("FedAvg has not been bootstrapped".into()))?;
        let next = fedavg_round(model, problem, self.tau, self.alpha_local)?;
        self.rounds += 1;
        guard_divergence(next.norm_inf(), self.iteration())?;
        self.model = Some(next);
        Ok(self.traffic(problem))
    }

    fn iteration(&self) -> i64 {
        self.rounds * self.tau as i64
    }

    /// Every client holds the server model; `d = −P∇f(x)`.
    fn snapshot(&self, problem: &FederatedProblem) -> Result<StackedState> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| FedError::Invariant("FedAvg has not been bootstrapped".into()))?;
        let x = StackedMat::broadcast(model, problem.num_clients());
        let g = problem.stacked_gradient(&x)?;
        let d = -1.0 * &center_project(&g);
        Ok(StackedState {
            x,
            d,
            t: self.iteration(),
        })
    }
}
