//! FedCET client/server protocol.
//!
//! Each client keeps its last two iterates and their gradients. Between
//! communications it runs
//!
//! ```text
//! x_i(t+1) = 2x_i(t) − x_i(t−1) − α∇f_i(x_i(t)) + α∇f_i(x_i(t−1))
//! ```
//!
//! and every `τ` iterations it uploads that same vector (the payload) instead
//! of applying it. The server averages the payloads and broadcasts the mean;
//! each client then sets `x_i(t+1) = cα·mean + (1 − cα)·payload_i`. A single
//! `n`-vector travels in each direction per round.

use ndarray::Array1;

use crate::algorithms::{guard_divergence, DownlinkMode, HyperParams, RoundAlgorithm, Traffic};
use crate::error::{FedError, Result};
use crate::linalg::{ModelVec, StackedMat};
use crate::loss::{ClientLoss, FederatedProblem};
use crate::oracle::{lyapunov, FixedPoint, LyapunovSample, StackedState};

#[derive(Debug, Clone, PartialEq)]
pub struct FedCetClientState {
    /// `x_i(t)`
    pub x_curr: ModelVec,
    /// `x_i(t−1)`
    pub x_prev: ModelVec,
    /// `∇f_i(x_i(t))`
    pub g_curr: ModelVec,
    /// `∇f_i(x_i(t−1))`
    pub g_prev: ModelVec,
    pub t: i64,
}

impl FedCetClientState {
    /// `2x(t) − x(t−1) − α∇f(x(t)) + α∇f(x(t−1))`.
    pub fn payload(&self, alpha: f64) -> ModelVec {
        let p = self.x_curr.as_array() * 2.0
            - self.x_prev.as_array()
            - &(self.g_curr.as_array() * alpha)
            + &(self.g_prev.as_array() * alpha);
        ModelVec::from_array_unchecked(p)
    }

    /// Implicit correction `d_i(t) = (x_i(t−1) − x_i(t))/α − ∇f_i(x_i(t−1))`.
    pub fn correction(&self, alpha: f64) -> ModelVec {
        let d = (self.x_prev.as_array() - self.x_curr.as_array()) / alpha - self.g_prev.as_array();
        ModelVec::from_array_unchecked(d)
    }

    fn advance(&self, x_next: Array1<f64>, loss: &dyn ClientLoss) -> Self {
        let mut g = Array1::zeros(x_next.len());
        loss.gradient_into(x_next.view(), g.view_mut());
        FedCetClientState {
            x_prev: self.x_curr.clone(),
            g_prev: self.g_curr.clone(),
            x_curr: ModelVec::from_array_unchecked(x_next),
            g_curr: ModelVec::from_array_unchecked(g),
            t: self.t + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UplinkMsg {
    pub client_id: usize,
    pub payload: ModelVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkMsg {
    pub payload: ModelVec,
}

#[derive(Debug, Clone)]
pub struct CommOutcome {
    pub states: Vec<FedCetClientState>,
    pub uplink: Vec<UplinkMsg>,
    pub downlink: DownlinkMsg,
}

impl CommOutcome {
    pub fn traffic(&self, mode: DownlinkMode) -> Traffic {
        Traffic {
            up: self.uplink.iter().map(|m| m.payload.len() as u64).sum(),
            down: mode.scalars(self.downlink.payload.len(), self.states.len()),
        }
    }
}

/// Local update between communications.
pub fn fedcet_local_step(
    state: &FedCetClientState,
    loss: &dyn ClientLoss,
    alpha: f64,
) -> FedCetClientState {
    state.advance(state.payload(alpha).into_inner(), loss)
}

/// Server mean of the payloads and each client's mixed result
/// `weight·mean + (1 − weight)·payload_i`, with `weight = cα`.
pub fn mix_payloads(payloads: &[ModelVec], weight: f64) -> (Vec<ModelVec>, ModelVec) {
    let n = payloads.first().map_or(0, |p| p.len());
    let mut mean = Array1::<f64>::zeros(n);
    for p in payloads {
        mean += p.as_array();
    }
    mean /= payloads.len() as f64;
    let mixed = payloads
        .iter()
        .map(|p| ModelVec::from_array_unchecked(&mean * weight + &(p.as_array() * (1.0 - weight))))
        .collect();
    (mixed, ModelVec::from_array_unchecked(mean))
}

/// Communication iteration: every client uploads its payload and mixes it
/// with the broadcast mean.
pub fn fedcet_comm_round(
    states: &[FedCetClientState],
    problem: &FederatedProblem,
    hp: &HyperParams,
) -> Result<CommOutcome> {
    hp.check_problem(problem)?;
    if states.len() != problem.num_clients() {
        return Err(FedError::dim(format!(
            "{} client states for {} clients",
            states.len(),
            problem.num_clients()
        )));
    }
    if let Some(s) = states
        .iter()
        .find(|s| (s.t + 1).rem_euclid(hp.tau() as i64) != 0)
    {
        return Err(FedError::Invariant(format!(
            "communication requested at t = {} with tau = {}",
            s.t,
            hp.tau()
        )));
    }
    let alpha = hp.alpha();
    let uplink: Vec<UplinkMsg> = states
        .iter()
        .enumerate()
        .map(|(client_id, s)| UplinkMsg {
            client_id,
            payload: s.payload(alpha),
        })
        .collect();
    let payloads: Vec<ModelVec> = uplink.iter().map(|m| m.payload.clone()).collect();
    let (mixed, mean) = mix_payloads(&payloads, hp.c() * alpha);
    let next = states
        .iter()
        .zip(mixed)
        .zip(problem.losses())
        .map(|((s, x), loss)| s.advance(x.into_inner(), loss))
        .collect();
    Ok(CommOutcome {
        states: next,
        uplink,
        downlink: DownlinkMsg { payload: mean },
    })
}

/// Bootstrap from `x_i(−2)` (rows of `x_init`): one plain gradient step to
/// `x_i(−1)`, then a communication to `x_i(0)`.
pub fn fedcet_init(
    problem: &FederatedProblem,
    hp: &HyperParams,
    x_init: &StackedMat,
) -> Result<CommOutcome> {
    hp.check_problem(problem)?;
    if x_init.nrows() != problem.num_clients() || x_init.ncols() != problem.dim() {
        return Err(FedError::dim(format!(
            "initial iterate is {}x{}, problem is {}x{}",
            x_init.nrows(),
            x_init.ncols(),
            problem.num_clients(),
            problem.dim()
        )));
    }
    let alpha = hp.alpha();
    let pre: Vec<FedCetClientState> = problem
        .losses()
        .enumerate()
        .map(|(i, loss)| {
            let x2 = x_init.row_vec(i);
            let mut g2 = Array1::zeros(x2.len());
            loss.gradient_into(x2.view(), g2.view_mut());
            let x1 = x2.as_array() - &(&g2 * alpha);
            let start = FedCetClientState {
                x_curr: x2.clone(),
                x_prev: x2,
                g_curr: ModelVec::from_array_unchecked(g2.clone()),
                g_prev: ModelVec::from_array_unchecked(g2),
                t: -2,
            };
            start.advance(x1, loss)
        })
        .collect();
    fedcet_comm_round(&pre, problem, hp)
}

fn stack(states: &[FedCetClientState], alpha: f64) -> StackedState {
    let n = states[0].x_curr.len();
    let mut x = ndarray::Array2::zeros((states.len(), n));
    let mut d = ndarray::Array2::zeros((states.len(), n));
    for (i, s) in states.iter().enumerate() {
        x.row_mut(i).assign(s.x_curr.as_array());
        d.row_mut(i).assign(s.correction(alpha).as_array());
    }
    StackedState {
        x: StackedMat::from_array_unchecked(x),
        d: StackedMat::from_array_unchecked(d),
        t: states[0].t,
    }
}

fn max_abs_model(states: &[FedCetClientState]) -> f64 {
    states
        .iter()
        .map(|s| s.x_curr.norm_inf())
        .fold(0.0, f64::max)
}

/// FedCET as a [`RoundAlgorithm`].
#[derive(Debug, Clone)]
pub struct FedCet {
    hp: HyperParams,
    x_init: StackedMat,
    downlink: DownlinkMode,
    states: Vec<FedCetClientState>,
}

impl FedCet {
    pub fn new(hp: HyperParams, x_init: StackedMat, downlink: DownlinkMode) -> Self {
        FedCet {
            hp,
            x_init,
            downlink,
            states: Vec::new(),
        }
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn states(&self) -> &[FedCetClientState] {
        &self.states
    }

    /// Stacked `(x(t), d(t))` with `d` reconstructed from the client histories.
    pub fn stacked(&self) -> Result<StackedState> {
        if self.states.is_empty() {
            return Err(FedError::Invariant(
                "FedCET has not been bootstrapped".into(),
            ));
        }
        Ok(stack(&self.states, self.hp.alpha()))
    }

    /// One iteration `t → t+1`; returns the traffic if it was a communication.
    pub fn step(&mut self, problem: &FederatedProblem) -> Result<Option<Traffic>> {
        if self.states.is_empty() {
            return Err(FedError::Invariant(
                "FedCET has not been bootstrapped".into(),
            ));
        }
        let t = self.states[0].t;
        let traffic = if (t + 1).rem_euclid(self.hp.tau() as i64) == 0 {
            let out = fedcet_comm_round(&self.states, problem, &self.hp)?;
            let traffic = out.traffic(self.downlink);
            self.states = out.states;
            Some(traffic)
        } else {
            self.states = self
                .states
                .iter()
                .zip(problem.losses())
                .map(|(s, loss)| fedcet_local_step(s, loss, self.hp.alpha()))
                .collect();
            None
        };
        guard_divergence(max_abs_model(&self.states), t + 1)?;
        Ok(traffic)
    }
}

impl RoundAlgorithm for FedCet {
    fn name(&self) -> &'static str {
        "fedcet"
    }

    fn bootstrap(&mut self, problem: &FederatedProblem) -> Result<Traffic> {
        let out = fedcet_init(problem, &self.hp, &self.x_init)?;
        let traffic = out.traffic(self.downlink);
        self.states = out.states;
        guard_divergence(max_abs_model(&self.states), 0)?;
        Ok(traffic)
    }

    fn round(&mut self, problem: &FederatedProblem) -> Result<Traffic> {
        let mut total = Traffic::default();
        for _ in 0..self.hp.tau() {
            if let Some(t) = self.step(problem)? {
                total += t;
            }
        }
        Ok(total)
    }

    fn iteration(&self) -> i64 {
        self.states.first().map_or(-2, |s| s.t)
    }

    fn snapshot(&self, _problem: &FederatedProblem) -> Result<StackedState> {
        self.stacked()
    }

    fn lyapunov(&self, state: &StackedState, fp: &FixedPoint) -> Result<Option<LyapunovSample>> {
        lyapunov(state, fp, &self.hp).map(Some)
    }
}

/// Stacked states at every iteration `t = 0..=iterations`.
pub fn fedcet_iterates(
    problem: &FederatedProblem,
    hp: &HyperParams,
    x_init: &StackedMat,
    iterations: usize,
) -> Result<Vec<StackedState>> {
    let mut algo = FedCet::new(*hp, x_init.clone(), DownlinkMode::Broadcast);
    algo.bootstrap(problem)?;
    let mut trace = vec![algo.stacked()?];
    for _ in 0..iterations {
        algo.step(problem)?;
        trace.push(algo.stacked()?);
    }
    Ok(trace)
}

/// Stacked states at every round boundary `t = τk`, `k = 0..=rounds`.
pub fn fedcet_run(
    problem: &FederatedProblem,
    hp: &HyperParams,
    x_init: &StackedMat,
    rounds: usize,
) -> Result<Vec<StackedState>> {
    if rounds == 0 {
        return Err(FedError::config("need at least one round"));
    }
    let mut algo = FedCet::new(*hp, x_init.clone(), DownlinkMode::Broadcast);
    algo.bootstrap(problem)?;
    let mut trace = vec![algo.stacked()?];
    for _ in 0..rounds {
        algo.round(problem)?;
        trace.push(algo.stacked()?);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{DiagonalQuadratic, LossConstants, QuadraticRisk};
    use ndarray::{array, Array2};
    use std::sync::Arc;

    fn square_problem() -> FederatedProblem {
        // f(x) = x², so L = μ = 2.
        FederatedProblem::new(vec![Arc::new(
            DiagonalQuadratic::new(vec![2.0], vec![0.0]).unwrap(),
        )])
        .unwrap()
    }

    #[test]
    fn single_client_bootstrap_and_local_step() {
        let p = square_problem();
        let hp = HyperParams::for_problem(&p, 2, 0.01, None).unwrap();
        let x_init = StackedMat::new(array![[1.0]]).unwrap();
        let out = fedcet_init(&p, &hp, &x_init).unwrap();
        let s = &out.states[0];
        assert!((s.x_prev[0] - 0.98).abs() < 1e-15);
        assert!((s.x_curr[0] - 0.9604).abs() < 1e-15);
        assert_eq!(s.t, 0);

        let next = fedcet_local_step(s, p.loss(0), hp.alpha());
        assert!((next.x_curr[0] - 0.941192).abs() < 1e-15);
        assert!((next.x_curr[0] - 0.98f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn zero_data_stays_at_zero() {
        let p = FederatedProblem::from_quadratic_risks(vec![
            QuadraticRisk::new(Array2::zeros((2, 3))).unwrap(),
            QuadraticRisk::new(Array2::zeros((4, 3))).unwrap(),
        ])
        .unwrap();
        let hp = HyperParams::for_problem(&p, 3, 0.02, None).unwrap();
        let trace = fedcet_run(&p, &hp, &StackedMat::zeros(2, 3), 5).unwrap();
        assert!(trace
            .iter()
            .all(|s| s.x.max_abs() == 0.0 && s.d.max_abs() == 0.0));
    }

    #[test]
    fn fixed_point_history_is_reproduced() {
        let q = DiagonalQuadratic::new(vec![2.0, 3.0], vec![1.0, -1.0]).unwrap();
        let xstar = ModelVec::new(vec![1.0, -1.0]).unwrap();
        let s = FedCetClientState {
            x_curr: xstar.clone(),
            x_prev: xstar.clone(),
            g_curr: ModelVec::zeros(2),
            g_prev: ModelVec::zeros(2),
            t: 0,
        };
        assert_eq!(fedcet_local_step(&s, &q, 0.1).x_curr, xstar);
    }

    #[test]
    fn mixing_examples() {
        let p = |v: f64| ModelVec::new(vec![v]).unwrap();
        let (mixed, mean) = mix_payloads(&[p(1.0), p(0.0)], 0.5);
        assert_eq!(mean[0], 0.5);
        assert_eq!((mixed[0][0], mixed[1][0]), (0.75, 0.25));

        let (mixed, _) = mix_payloads(&[p(3.0), p(3.0), p(3.0)], 0.37);
        assert!(mixed.iter().all(|m| m[0] == 3.0));

        let (mixed, _) = mix_payloads(&[p(1.0), p(-2.0)], 0.0);
        assert_eq!((mixed[0][0], mixed[1][0]), (1.0, -2.0));
    }

    #[test]
    fn comm_round_checks_schedule() {
        let p = square_problem();
        let hp = HyperParams::for_problem(&p, 2, 0.01, None).unwrap();
        let out = fedcet_init(&p, &hp, &StackedMat::new(array![[1.0]]).unwrap()).unwrap();
        // t = 0, τ = 2: the next iteration is local.
        assert!(matches!(
            fedcet_comm_round(&out.states, &p, &hp),
            Err(FedError::Invariant(_))
        ));
    }

    #[test]
    fn identical_clients_stay_identical() {
        let q = QuadraticRisk::new(array![[1.0, -2.0], [0.5, 4.0]]).unwrap();
        let p = FederatedProblem::from_quadratic_risks(vec![q.clone(), q.clone(), q]).unwrap();
        let hp = HyperParams::for_problem(&p, 3, 0.03, None).unwrap();
        let x_init = StackedMat::broadcast(&ModelVec::new(vec![2.0, 2.0]).unwrap(), 3);
        for s in fedcet_iterates(&p, &hp, &x_init, 12).unwrap() {
            assert_eq!(s.x.row(0), s.x.row(1));
            assert_eq!(s.x.row(1), s.x.row(2));
        }
    }

    #[test]
    fn divergence_guard_trips() {
        // Bypass validation with a step far beyond 2/L through declared constants.
        let k = LossConstants::new(1.0, 1.0).unwrap();
        let q = DiagonalQuadratic::with_constants(vec![1.0], vec![0.0], k).unwrap();
        let fake = DiagonalQuadratic::new(vec![1000.0], vec![0.0]).unwrap();
        let p_declared = FederatedProblem::new(vec![Arc::new(q)]).unwrap();
        let hp = HyperParams::for_problem(&p_declared, 1, 0.9, None).unwrap();
        let p_real = FederatedProblem::new(vec![Arc::new(fake)]).unwrap();
        let mut algo = FedCet::new(
            hp,
            StackedMat::new(array![[1.0]]).unwrap(),
            DownlinkMode::Broadcast,
        );
        algo.bootstrap(&p_real).unwrap();
        let err = (0..100).map(|_| algo.round(&p_real)).find(|r| r.is_err());
        assert!(matches!(err, Some(Err(FedError::Divergence { .. }))));
    }

    #[test]
    fn traffic_is_one_vector_each_way() {
        let q = QuadraticRisk::new(array![[1.0, 2.0, 3.0]]).unwrap();
        let p = FederatedProblem::from_quadratic_risks(vec![q.clone(), q.clone(), q.clone(), q])
            .unwrap();
        let hp = HyperParams::for_problem(&p, 2, 0.01, None).unwrap();
        let mut algo = FedCet::new(hp, StackedMat::zeros(4, 3), DownlinkMode::Broadcast);
        assert_eq!(algo.bootstrap(&p).unwrap(), Traffic { up: 12, down: 3 });
        assert_eq!(algo.round(&p).unwrap(), Traffic { up: 12, down: 3 });
        let mut uni = FedCet::new(hp, StackedMat::zeros(4, 3), DownlinkMode::Unicast);
        assert_eq!(uni.bootstrap(&p).unwrap(), Traffic { up: 12, down: 12 });
    }
}
