//! SCAFFOLD with the cheap control-variate update.

use ndarray::Array1;

use crate::algorithms::{guard_divergence, DownlinkMode, RoundAlgorithm, Traffic};
use crate::error::{FedError, Result};
use crate::linalg::{ModelVec, StackedMat};
use crate::loss::FederatedProblem;
use crate::oracle::StackedState;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldState {
    pub server_model: ModelVec,
    pub server_control: ModelVec,
    pub client_controls: Vec<ModelVec>,
    pub global_lr: f64,
    pub local_lr: f64,
}

impl ScaffoldState {
    /// Zero controls.
    pub fn new(
        server_model: ModelVec,
        num_clients: usize,
        global_lr: f64,
        local_lr: f64,
    ) -> Result<Self> {
        if !(global_lr > 0.0 && local_lr > 0.0 && global_lr.is_finite() && local_lr.is_finite()) {
            return Err(FedError::config(format!(
                "SCAFFOLD learning rates must be > 0, got global {global_lr}, local {local_lr}"
            )));
        }
        let n = server_model.len();
        Ok(ScaffoldState {
            server_model,
            server_control: ModelVec::zeros(n),
            client_controls: vec![ModelVec::zeros(n); num_clients],
            global_lr,
            local_lr,
        })
    }

    /// `α_g = 1`, `α_l = 1/(81τL)`.
    pub fn default_lrs(tau: u32, l: f64) -> (f64, f64) {
        (1.0, 1.0 / (81.0 * tau as f64 * l))
    }
}

/// One round: `τ` corrected local steps per client, then server aggregation
/// of the model and control deltas.
pub fn scaffold_round(
    state: &ScaffoldState,
    problem: &FederatedProblem,
    tau: u32,
) -> Result<ScaffoldState> {
    let n = problem.dim();
    let nc = problem.num_clients();
    if state.server_model.len() != n || state.client_controls.len() != nc {
        return Err(FedError::dim("SCAFFOLD state does not match the problem"));
    }
    if tau == 0 {
        return Err(FedError::config("tau must be >= 1"));
    }
    let x = state.server_model.as_array();
    let c = state.server_control.as_array();
    let al = state.local_lr;
    let mut dy_sum = Array1::<f64>::zeros(n);
    let mut dc_sum = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(n);
    let mut controls = Vec::with_capacity(nc);
    for (loss, ci) in problem.losses().zip(&state.client_controls) {
        let shift = c - ci.as_array();
        let mut y = x.clone();
        for _ in 0..tau {
            loss.gradient_into(y.view(), g.view_mut());
            g += &shift;
            y.scaled_add(-al, &g);
        }
        let ci_new = ci.as_array() - c + &((x - &y) / (tau as f64 * al));
        dy_sum += &(&y - x);
        dc_sum += &(&ci_new - ci.as_array());
        controls.push(ModelVec::from_array_unchecked(ci_new));
    }
    let inv = 1.0 / nc as f64;
    let model = x + &(dy_sum * (state.global_lr * inv));
    let control = c + &(dc_sum * inv);
    Ok(ScaffoldState {
        server_model: ModelVec::from_array_unchecked(model),
        server_control: ModelVec::from_array_unchecked(control),
        client_controls: controls,
        global_lr: state.global_lr,
        local_lr: state.local_lr,
    })
}

#[derive(Debug, Clone)]
pub struct Scaffold {
    tau: u32,
    global_lr: f64,
    local_lr: f64,
    x_init: StackedMat,
    downlink: DownlinkMode,
    state: Option<ScaffoldState>,
    rounds: i64,
}

impl Scaffold {
    pub fn new(
        tau: u32,
        global_lr: f64,
        local_lr: f64,
        x_init: StackedMat,
        downlink: DownlinkMode,
    ) -> Result<Self> {
        if tau == 0 {
            return Err(FedError::config("tau must be >= 1"));
        }
        // Validates the rates.
        ScaffoldState::new(ModelVec::zeros(1), 1, global_lr, local_lr)?;
        Ok(Scaffold {
            tau,
            global_lr,
            local_lr,
            x_init,
            downlink,
            state: None,
            rounds: 0,
        })
    }

    pub fn state(&self) -> Option<&ScaffoldState> {
        self.state.as_ref()
    }

    fn traffic(&self, problem: &FederatedProblem) -> Traffic {
        let (nc, n) = (problem.num_clients(), problem.dim());
        Traffic {
            up: (2 * nc * n) as u64,
            down: self.downlink.scalars(2 * n, nc),
        }
    }

    fn current(&self) -> Result<&ScaffoldState> {
        self.state
            .as_ref()
            .ok_or_else(|| FedError::Invariant("SCAFFOLD has not been bootstrapped".into()))
    }
}

impl RoundAlgorithm for Scaffold {
    fn name(&self) -> &'static str {
        "scaffold"
    }

    /// Round 0: clients upload their initial model and its gradient as the
    /// starting control; the server returns the averages of both.
    fn bootstrap(&mut self, problem: &FederatedProblem) -> Result<Traffic> {
        if self.x_init.nrows() != problem.num_clients() || self.x_init.ncols() != problem.dim() {
            return Err(FedError::dim("initial iterate does not match the problem"));
        }
        let x0 = self.x_init.column_mean();
        let mut st = ScaffoldState::new(
            x0.clone(),
            problem.num_clients(),
            self.global_lr,
            self.local_lr,
        )?;
        st.client_controls = problem
            .losses()
            .map(|loss| {
                let mut g = Array1::zeros(x0.len());
                loss.gradient_into(x0.view(), g.view_mut());
                ModelVec::from_array_unchecked(g)
            })
            .collect();
        let rows = StackedMat::from_rows(&st.client_controls)?;
        st.server_control = rows.column_mean();
        self.state = Some(st);
        self.rounds = 0;
        Ok(self.traffic(problem))
    }

    fn round(&mut self, problem: &FederatedProblem) -> Result<Traffic> {
        let next = scaffold_round(self.current()?, problem, self.tau)?;
        self.rounds += 1;
        guard_divergence(next.server_model.norm_inf(), self.iteration())?;
        self.state = Some(next);
        Ok(self.traffic(problem))
    }

    fn iteration(&self) -> i64 {
        self.rounds * self.tau as i64
    }

    /// Every client holds the server model; row `i` of `d` is `c − c_i`.
    fn snapshot(&self, problem: &FederatedProblem) -> Result<StackedState> {
        let st = self.current()?;
        let x = StackedMat::broadcast(&st.server_model, problem.num_clients());
        let mut d = ndarray::Array2::zeros((problem.num_clients(), problem.dim()));
        for (i, ci) in st.client_controls.iter().enumerate() {
            d.row_mut(i)
                .assign(&(st.server_control.as_array() - ci.as_array()));
        }
        Ok(StackedState {
            x,
            d: StackedMat::from_array_unchecked(d),
            t: self.iteration(),
        })
    }
}
