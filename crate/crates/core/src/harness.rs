//! Round scheduler and per-round telemetry.

use serde::Serialize;

use crate::algorithms::{RoundAlgorithm, Traffic};
use crate::error::{FedError, Result};
use crate::loss::FederatedProblem;
use crate::oracle::{convergence_error, fixed_point_residual, FixedPoint};

/// Telemetry at one round boundary `t = τk`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub algorithm: String,
    pub k: u64,
    pub iteration: i64,
    pub error: f64,
    pub lyapunov: Option<f64>,
    pub r_consensus: f64,
    pub r_gradient: f64,
    pub scalars_up_cum: u64,
    pub scalars_down_cum: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    max_rounds: u64,
    tol: f64,
    residual_tol: f64,
    divergence_cap: f64,
}

impl StopRule {
    pub fn new(max_rounds: u64, tol: f64, divergence_cap: f64) -> Result<Self> {
        if max_rounds == 0 {
            return Err(FedError::config("max_rounds must be >= 1"));
        }
        if tol.is_nan() || tol < 0.0 {
            return Err(FedError::config(format!("tol must be >= 0, got {tol}")));
        }
        if divergence_cap.is_nan() || divergence_cap <= 0.0 {
            return Err(FedError::config(format!(
                "divergence_cap must be > 0, got {divergence_cap}"
            )));
        }
        Ok(StopRule {
            max_rounds,
            tol,
            residual_tol: f64::INFINITY,
            divergence_cap,
        })
    }

    /// Also require both fixed-point residuals to be at most `residual_tol`
    /// before declaring convergence.
    pub fn with_residual_tol(mut self, residual_tol: f64) -> Result<Self> {
        if residual_tol.is_nan() || residual_tol < 0.0 {
            return Err(FedError::config(format!(
                "residual_tol must be >= 0, got {residual_tol}"
            )));
        }
        self.residual_tol = residual_tol;
        Ok(self)
    }

    pub fn max_rounds(&self) -> u64 {
        self.max_rounds
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn residual_tol(&self) -> f64 {
        self.residual_tol
    }

    pub fn divergence_cap(&self) -> f64 {
        self.divergence_cap
    }

    fn converged(&self, r: &RoundRecord) -> bool {
        r.error <= self.tol && r.r_consensus.max(r.r_gradient) <= self.residual_tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxRounds,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub algorithm: String,
    pub status: RunStatus,
    pub records: Vec<RoundRecord>,
}

impl RunOutcome {
    pub fn last(&self) -> &RoundRecord {
        self.records.last().expect("a run records at least round 0")
    }
}

fn record(
    algo: &dyn RoundAlgorithm,
    problem: &FederatedProblem,
    fp: &FixedPoint,
    k: u64,
    total: Traffic,
) -> Result<RoundRecord> {
    let state = algo.snapshot(problem)?;
    let (r_consensus, r_gradient) = fixed_point_residual(&state, problem)?;
    let lyapunov = algo.lyapunov(&state, fp)?.map(|s| s.v);
    Ok(RoundRecord {
        algorithm: algo.name().to_string(),
        k,
        iteration: algo.iteration(),
        error: convergence_error(&state, &fp.optimum),
        lyapunov,
        r_consensus,
        r_gradient,
        scalars_up_cum: total.up,
        scalars_down_cum: total.down,
    })
}

/// Bootstraps `algo`, records round 0 and keeps running rounds until the
/// error drops to `tol` (with both residuals at most `residual_tol`),
/// `max_rounds` rounds have run, or the run diverges.
/// Divergence is a status, not an error; the last finite record is kept.
pub fn run_algorithm(
    algo: &mut dyn RoundAlgorithm,
    problem: &FederatedProblem,
    stop: &StopRule,
    fp: &FixedPoint,
) -> Result<RunOutcome> {
    let mut records = Vec::new();
    let name = algo.name().to_string();
    let finish = |records: Vec<RoundRecord>, status| RunOutcome {
        algorithm: name.clone(),
        status,
        records,
    };
    let mut total = match algo.bootstrap(problem) {
        Ok(t) => t,
        Err(FedError::Divergence { .. }) => return Ok(finish(records, RunStatus::Diverged)),
        Err(e) => return Err(e),
    };
    let mut k = 0u64;
    loop {
        let rec = record(algo, problem, fp, k, total)?;
        let (diverged, converged) = (
            rec.error.is_nan() || rec.error > stop.divergence_cap,
            stop.converged(&rec),
        );
        records.push(rec);
        if diverged {
            return Ok(finish(records, RunStatus::Diverged));
        }
        if converged {
            return Ok(finish(records, RunStatus::Converged));
        }
        if k >= stop.max_rounds {
            return Ok(finish(records, RunStatus::MaxRounds));
        }
        match algo.round(problem) {
            Ok(t) => total += t,
            Err(FedError::Divergence { .. }) => return Ok(finish(records, RunStatus::Diverged)),
            Err(e) => return Err(e),
        }
        k += 1;
    }
}

/// Runs sharing one problem, aligned by round index.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<RunOutcome>,
}

impl Comparison {
    /// Largest round index present in every run.
    pub fn final_common_round(&self) -> u64 {
        self.runs.iter().map(|r| r.last().k).min().unwrap_or(0)
    }

    pub fn run(&self, algorithm: &str) -> Option<&RunOutcome> {
        self.runs.iter().find(|r| r.algorithm == algorithm)
    }

    pub fn error_at(&self, algorithm: &str, k: u64) -> Option<f64> {
        self.run(algorithm)?
            .records
            .get(k as usize)
            .map(|r| r.error)
    }

    /// Error of a run at round `k`, or its final error if it stopped earlier
    /// by converging.
    pub fn error_at_or_final(&self, algorithm: &str, k: u64) -> Option<f64> {
        let run = self.run(algorithm)?;
        match run.records.get(k as usize) {
            Some(r) => Some(r.error),
            None if run.status == RunStatus::Converged => Some(run.last().error),
            None => None,
        }
    }

    /// One row per round up to the longest run: `(k, errors per run)`.
    pub fn rows(&self) -> Vec<(u64, Vec<Option<f64>>)> {
        let longest = self.runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
        (0..longest)
            .map(|k| {
                let errs = self
                    .runs
                    .iter()
                    .map(|r| r.records.get(k).map(|x| x.error))
                    .collect();
                (k as u64, errs)
            })
            .collect()
    }
}

pub fn compare(
    algos: &mut [Box<dyn RoundAlgorithm>],
    problem: &FederatedProblem,
    stop: &StopRule,
    fp: &FixedPoint,
) -> Result<Comparison> {
    let runs = algos
        .iter_mut()
        .map(|a| run_algorithm(a.as_mut(), problem, stop, fp))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { runs })
}
