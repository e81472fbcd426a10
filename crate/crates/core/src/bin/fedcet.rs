use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedcet::experiment::{self, ExperimentConfig, RunManifest};
use fedcet::lr_search::{search, SearchConfig};
use fedcet::FedError;

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(
    name = "fedcet",
    version,
    about = "FedCET federated optimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated algorithms (overrides `algorithms`).
    #[arg(long, value_delimiter = ',')]
    algo: Vec<String>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replay a manifest and check that the outputs are reproduced exactly.
    #[arg(long)]
    verify_manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured algorithms and write per-run CSVs and manifests.
    Run(RunArgs),
    /// Like `run`, plus a wide per-round comparison table per seed.
    Compare(RunArgs),
    /// Learning-rate search and predicted rates for given constants.
    LrSearch {
        #[arg(long)]
        mu: f64,
        #[arg(long)]
        l: f64,
        #[arg(long)]
        tau: u32,
        #[arg(long, default_value_t = 0.001)]
        h_frac: f64,
    },
    /// Protocol vs matrix-form and round-map vs unrolled-step equivalence.
    OracleCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
}

fn exit_code(e: &FedError) -> u8 {
    match e {
        FedError::Io { .. } => EXIT_IO,
        FedError::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    algo: &[String],
    set: &[String],
) -> Result<ExperimentConfig, FedError> {
    let mut overrides = set.to_vec();
    if let Some(s) = seed {
        overrides.push(format!("seeds=[{s}]"));
    }
    if !algo.is_empty() {
        let quoted: Vec<String> = algo.iter().map(|a| format!("{:?}", a.trim())).collect();
        overrides.push(format!("algorithms=[{}]", quoted.join(",")));
    }
    ExperimentConfig::load(path, &overrides)
}

fn verify(path: &Path) -> Result<u8, FedError> {
    let manifest = RunManifest::load(path)?;
    let checks = experiment::verify_manifest(&manifest)?;
    let mut ok = true;
    for c in &checks {
        println!("{} {}", if c.matches { "ok  " } else { "FAIL" }, c.file);
        ok &= c.matches;
    }
    Ok(if ok { 0 } else { EXIT_CHECK })
}

fn run(args: &RunArgs, with_compare: bool) -> Result<u8, FedError> {
    if let Some(m) = &args.verify_manifest {
        return verify(m);
    }
    let cfg = load_config(args.config.as_deref(), args.seed, &args.algo, &args.set)?;
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let written = experiment::write_runs(&cfg, &out_dir, with_compare)?;
    let mut code = 0;
    for w in &written {
        for f in &w.files {
            println!("{}", w.dir.join(f).display());
        }
        for (algo, status) in &w.status {
            println!("seed {} {algo}: {status}", w.seed);
        }
        if w.diverged {
            code = EXIT_DIVERGED;
        }
    }
    Ok(code)
}

fn lr_search(mu: f64, l: f64, tau: u32, h_frac: f64) -> Result<u8, FedError> {
    let out = search(&SearchConfig::with_step_fraction(mu, l, tau, h_frac)?)?;
    println!("initial_bound = {:e}", out.initial_bound);
    println!("alpha0 = {:e}", out.alpha0);
    println!("step = {:e}", out.step);
    println!("increments = {}", out.increments);
    println!("alpha = {:e}", out.report.alpha);
    println!("c_max = {:e}", out.report.c_max);
    println!("rho1 = {:e}", out.report.rho1);
    println!("rho2 = {:e}", out.report.rho2);
    println!("rho = {:e}", out.report.rho);
    Ok(0)
}

fn oracle(
    config: Option<&Path>,
    seed: Option<u64>,
    set: &[String],
    iterations: usize,
    rounds: usize,
    tol: f64,
) -> Result<u8, FedError> {
    let cfg = load_config(config, seed, &[], set)?;
    let mut code = 0;
    for &s in &cfg.seeds {
        let r = experiment::resolve(&cfg, s)?;
        let rep = experiment::oracle_check(&r, iterations, rounds, tol)?;
        println!(
            "seed {s}: scalar_vs_matrix = {:e} over {} iterations, round_map = {:e} over {} rounds, tol = {:e}: {}",
            rep.scalar_vs_matrix,
            rep.iterations,
            rep.round_map,
            rep.rounds,
            rep.tol,
            if rep.passed { "PASS" } else { "FAIL" }
        );
        if !rep.passed {
            code = EXIT_CHECK;
        }
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a, false),
        Command::Compare(a) => run(a, true),
        Command::LrSearch { mu, l, tau, h_frac } => lr_search(*mu, *l, *tau, *h_frac),
        Command::OracleCheck {
            config,
            seed,
            set,
            iterations,
            rounds,
            tol,
        } => oracle(config.as_deref(), *seed, set, *iterations, *rounds, *tol),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
