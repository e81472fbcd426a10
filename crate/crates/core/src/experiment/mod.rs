//! Experiment pipeline: resolve a config for one seed, run the algorithms,
//! persist CSVs and a manifest, and replay manifests.

pub mod config;
pub mod data;
pub mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::algorithms::{
    fedcet_iterates, FedAvg, FedCet, HyperParams, RoundAlgorithm, Scaffold, ScaffoldState,
};
use crate::error::{FedError, Result};
use crate::harness::{compare, Comparison, RunStatus, StopRule};
use crate::linalg::StackedMat;
use crate::loss::FederatedProblem;
use crate::lr_search::{search, RateReport, SearchConfig, SearchOutcome};
use crate::oracle::{oracle_round, oracle_step, FixedPoint, StackedState};

pub use config::{ExperimentConfig, Setting, ALGORITHMS};
pub use data::{gen_data, gen_samples, problem_digest, vector_digest, UniformStream};
pub use output::{RunManifest, CSV_HEADER};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// A config bound to one seed with every `auto` value resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub problem: FederatedProblem,
    pub fixed_point: FixedPoint,
    pub hp: HyperParams,
    pub rates: RateReport,
    pub search: Option<SearchOutcome>,
    pub fedavg_lr: f64,
    pub scaffold_lrs: (f64, f64),
    pub x_init: StackedMat,
}

pub fn resolve(cfg: &ExperimentConfig, seed: u64) -> Result<Resolved> {
    let problem = gen_data(cfg, seed)?;
    resolve_problem(cfg, seed, problem)
}

/// Resolves learning rates and the fixed point for an arbitrary problem.
pub fn resolve_problem(
    cfg: &ExperimentConfig,
    seed: u64,
    problem: FederatedProblem,
) -> Result<Resolved> {
    cfg.validate()?;
    let k = problem.constants();
    let (l, mu) = (k.smoothness(), k.strong_convexity());
    let tau = cfg.tau;
    let (alpha, found) = match cfg.alpha {
        Setting::Fixed(a) => (a, None),
        Setting::Auto => {
            let out = search(&SearchConfig::with_step_fraction(mu, l, tau, cfg.h_frac)?)?;
            (out.report.alpha, Some(out))
        }
    };
    let hp = HyperParams::for_problem(&problem, tau, alpha, cfg.c.fixed())?;
    let rates = RateReport::at(hp.alpha(), hp.c(), mu, l, tau);
    let fixed_point = FixedPoint::for_problem(&problem)?;
    let (_, l_default) = ScaffoldState::default_lrs(tau, l);
    Ok(Resolved {
        seed,
        fedavg_lr: cfg
            .fedavg_lr
            .fixed()
            .unwrap_or_else(|| FedAvg::default_lr(tau, l)),
        scaffold_lrs: (
            cfg.scaffold_lr_global,
            cfg.scaffold_lr_local.fixed().unwrap_or(l_default),
        ),
        x_init: StackedMat::from_array_unchecked(ndarray::Array2::from_elem(
            (problem.num_clients(), problem.dim()),
            cfg.x_init,
        )),
        problem,
        fixed_point,
        hp,
        rates,
        search: found,
    })
}

pub fn build_algorithm(
    name: &str,
    cfg: &ExperimentConfig,
    r: &Resolved,
) -> Result<Box<dyn RoundAlgorithm>> {
    Ok(match name {
        "fedcet" => Box::new(FedCet::new(r.hp, r.x_init.clone(), cfg.downlink)),
        "fedavg" => Box::new(FedAvg::new(
            cfg.tau,
            r.fedavg_lr,
            r.x_init.clone(),
            cfg.downlink,
        )?),
        "scaffold" => Box::new(Scaffold::new(
            cfg.tau,
            r.scaffold_lrs.0,
            r.scaffold_lrs.1,
            r.x_init.clone(),
            cfg.downlink,
        )?),
        other => return Err(FedError::config(format!("unknown algorithm {other:?}"))),
    })
}

pub fn stop_rule(cfg: &ExperimentConfig) -> Result<StopRule> {
    StopRule::new(cfg.max_rounds, cfg.tol, cfg.divergence_cap)?.with_residual_tol(cfg.residual_tol)
}

/// Runs every configured algorithm on one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(Resolved, Comparison)> {
    let r = resolve(cfg, seed)?;
    let mut algos = cfg
        .algorithms
        .iter()
        .map(|a| build_algorithm(a, cfg, &r))
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare(&mut algos, &r.problem, &stop_rule(cfg)?, &r.fixed_point)?;
    Ok((r, cmp))
}

/// In-memory outputs of one seed: file name to contents, plus the manifest.
#[derive(Debug, Clone)]
pub struct SeedOutputs {
    pub files: BTreeMap<String, String>,
    pub manifest: RunManifest,
    pub comparison: Comparison,
}

impl SeedOutputs {
    pub fn any_diverged(&self) -> bool {
        self.comparison
            .runs
            .iter()
            .any(|r| r.status == RunStatus::Diverged)
    }
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Converged => "converged",
        RunStatus::MaxRounds => "max_rounds",
        RunStatus::Diverged => "diverged",
    }
}

pub fn seed_outputs(cfg: &ExperimentConfig, seed: u64, with_compare: bool) -> Result<SeedOutputs> {
    let (r, cmp) = run_seed(cfg, seed)?;
    let mut files = BTreeMap::new();
    for run in &cmp.runs {
        files.insert(
            output::run_csv_name(&run.algorithm, seed),
            output::records_csv(&run.records, seed),
        );
    }
    if with_compare {
        files.insert(output::compare_csv_name(seed), output::comparison_csv(&cmp));
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        seed,
        alpha: r.hp.alpha(),
        c: r.hp.c(),
        smoothness: r.hp.l(),
        strong_convexity: r.hp.mu(),
        rho1: r.rates.rho1,
        rho2: r.rates.rho2,
        rho_pred: r.rates.rho,
        data_sha256: problem_digest(&r.problem).unwrap_or_default(),
        x_star_sha256: vector_digest(&r.fixed_point.optimum),
        outputs: files
            .iter()
            .map(|(k, v)| (k.clone(), data::bytes_digest(v.as_bytes())))
            .collect(),
        status: cmp
            .runs
            .iter()
            .map(|run| (run.algorithm.clone(), status_name(run.status).to_string()))
            .collect(),
        config: cfg.clone(),
    };
    Ok(SeedOutputs {
        files,
        manifest,
        comparison: cmp,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WrittenRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub status: BTreeMap<String, String>,
    pub diverged: bool,
}

/// Runs every seed and writes `<algo>_seed<S>.csv` (plus `compare_seed<S>.csv`
/// when requested) and `manifest_seed<S>.toml` under `out_dir`.
pub fn write_runs(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    with_compare: bool,
) -> Result<Vec<WrittenRun>> {
    std::fs::create_dir_all(out_dir).map_err(|e| FedError::io(out_dir, e))?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let out = seed_outputs(cfg, seed, with_compare)?;
        for (name, body) in &out.files {
            output::write_file(&out_dir.join(name), body)?;
        }
        let mname = output::manifest_name(seed);
        output::write_file(&out_dir.join(&mname), &out.manifest.to_toml_string()?)?;
        let mut files: Vec<String> = out.files.keys().cloned().collect();
        files.push(mname);
        written.push(WrittenRun {
            seed,
            dir: out_dir.to_path_buf(),
            files,
            status: out.manifest.status.clone(),
            diverged: out.any_diverged(),
        });
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestCheck {
    pub file: String,
    pub expected: String,
    pub actual: String,
    pub matches: bool,
}

/// Regenerates the manifest's outputs in memory and compares digests.
pub fn verify_manifest(manifest: &RunManifest) -> Result<Vec<ManifestCheck>> {
    let with_compare = manifest
        .outputs
        .keys()
        .any(|k| k == &output::compare_csv_name(manifest.seed));
    let replay = seed_outputs(&manifest.config, manifest.seed, with_compare)?;
    let mut checks: Vec<ManifestCheck> = manifest
        .outputs
        .iter()
        .map(|(file, expected)| {
            let actual = replay
                .manifest
                .outputs
                .get(file)
                .cloned()
                .unwrap_or_default();
            ManifestCheck {
                file: file.clone(),
                matches: &actual == expected,
                expected: expected.clone(),
                actual,
            }
        })
        .collect();
    for (label, expected, actual) in [
        (
            "data_sha256",
            &manifest.data_sha256,
            &replay.manifest.data_sha256,
        ),
        (
            "x_star_sha256",
            &manifest.x_star_sha256,
            &replay.manifest.x_star_sha256,
        ),
    ] {
        checks.push(ManifestCheck {
            file: label.into(),
            expected: expected.clone(),
            actual: actual.clone(),
            matches: expected == actual,
        });
    }
    Ok(checks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleReport {
    pub iterations: usize,
    pub rounds: usize,
    /// Largest `‖x_protocol(t) − x_matrix(t)‖∞` over the iterations.
    pub scalar_vs_matrix: f64,
    /// Largest entrywise gap between the round map and `τ` unrolled steps.
    pub round_map: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Matrix-form trace from `t = 0` to `t = iterations`, starting at the bootstrap.
pub fn matrix_trace(
    problem: &FederatedProblem,
    hp: &HyperParams,
    x_init: &StackedMat,
    iterations: usize,
) -> Result<Vec<StackedState>> {
    let mut s = oracle_step(&StackedState::bootstrap(problem, hp, x_init)?, problem, hp)?;
    let mut trace = Vec::with_capacity(iterations + 1);
    trace.push(s.clone());
    for _ in 0..iterations {
        s = oracle_step(&s, problem, hp)?;
        trace.push(s.clone());
    }
    Ok(trace)
}

/// Client protocol vs matrix form over `iterations` steps, and round map vs
/// unrolled steps over `rounds` rounds.
pub fn oracle_check(
    r: &Resolved,
    iterations: usize,
    rounds: usize,
    tol: f64,
) -> Result<OracleReport> {
    let (p, hp) = (&r.problem, &r.hp);
    let proto = fedcet_iterates(p, hp, &r.x_init, iterations)?;
    let matrix = matrix_trace(p, hp, &r.x_init, iterations)?;
    let scalar_vs_matrix = proto
        .iter()
        .zip(&matrix)
        .map(|(a, b)| a.x.max_abs_diff(&b.x))
        .fold(0.0, f64::max);

    let mut s = matrix[0].clone();
    let mut round_map = 0.0f64;
    for _ in 0..rounds {
        let mapped = oracle_round(&s, p, hp)?;
        let mut unrolled = s.clone();
        for _ in 0..hp.tau() {
            unrolled = oracle_step(&unrolled, p, hp)?;
        }
        round_map = round_map
            .max(mapped.x.max_abs_diff(&unrolled.x))
            .max(mapped.d.max_abs_diff(&unrolled.d));
        s = unrolled;
    }
    Ok(OracleReport {
        iterations,
        rounds,
        scalar_vs_matrix,
        round_map,
        tol,
        passed: scalar_vs_matrix <= tol && round_map <= tol,
    })
}
