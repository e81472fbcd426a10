//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use fedcet::algorithms::{fedcet_iterates, FedAvg, FedCet, RoundAlgorithm, Scaffold};
use fedcet::experiment::{matrix_trace, resolve, ExperimentConfig, Resolved};
use fedcet::harness::{run_algorithm, RunStatus, StopRule};
use fedcet::linalg::{center_project, weighted_norm_sq, StackedMat, WeightSpec};
use fedcet::loss::{fd_relative_error, FederatedProblem};
use fedcet::lr_search::{
    c_max, condition_c1, condition_c2, guard_c1, guard_c2, initial_bound, lambda_max_m, rho1, rho2,
    search, SearchConfig,
};
use fedcet::oracle::{
    drift_bound, lyapunov, model_error_envelope, oracle_round_terms, oracle_step, LyapunovSample,
    StackedState,
};
use fedcet::{DownlinkMode, HyperParams, ModelVec};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn default_instance(seed: u64) -> Resolved {
    resolve(&ExperimentConfig::default(), seed).expect("default instance resolves")
}

/// FedCET round-boundary states from `k = 0` until `e(k) ≤ tol` with both
/// fixed-point residuals at most `residual_tol`, or `max_rounds`.
fn fedcet_boundaries(
    r: &Resolved,
    max_rounds: u64,
    tol: f64,
    residual_tol: f64,
) -> Vec<StackedState> {
    let mut algo = FedCet::new(r.hp, r.x_init.clone(), DownlinkMode::Broadcast);
    algo.bootstrap(&r.problem).unwrap();
    let mut out = vec![algo.snapshot(&r.problem).unwrap()];
    for _ in 0..max_rounds {
        let s = out.last().unwrap();
        let (rc, rg) = fedcet::oracle::fixed_point_residual(s, &r.problem).unwrap();
        if fedcet::oracle::convergence_error(s, &r.fixed_point.optimum) <= tol
            && rc.max(rg) <= residual_tol
        {
            break;
        }
        algo.round(&r.problem).unwrap();
        out.push(algo.snapshot(&r.problem).unwrap());
    }
    out
}

fn criterion_1() -> Verdict {
    let r = default_instance(1);
    let start = Instant::now();
    let iterations = 200;
    let proto = fedcet_iterates(&r.problem, &r.hp, &r.x_init, iterations).unwrap();
    let matrix = matrix_trace(&r.problem, &r.hp, &r.x_init, iterations).unwrap();
    let dev = proto
        .iter()
        .zip(&matrix)
        .map(|(a, b)| a.x.max_abs_diff(&b.x))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    verdict(
        dev <= 1e-10 && proto.len() == iterations + 1 && elapsed < Duration::from_secs(1),
        format!(
            "max |x_protocol - x_matrix| = {dev:.3e} over {iterations} iterations in {elapsed:.2?}"
        ),
    )
}

fn criterion_2() -> Verdict {
    let r = default_instance(1);
    let (p, hp) = (&r.problem, &r.hp);
    let start = Instant::now();
    let alpha = hp.alpha();
    let tau = hp.tau();
    let mut s = matrix_trace(p, hp, &r.x_init, 0).unwrap().remove(0);
    let (mut dev_next, mut dev_ab) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let terms = oracle_round_terms(&s, p, hp).unwrap();
        let mut steps = vec![s.clone()];
        for _ in 0..tau {
            steps.push(oracle_step(steps.last().unwrap(), p, hp).unwrap());
        }
        let end = steps.last().unwrap().clone();
        // A(k) and B(k) rebuilt from the unrolled iterates.
        let g0 = p.stacked_gradient(&steps[0].x).unwrap();
        let mut a = ((tau - 1) as f64 * alpha) * &g0;
        for step in &steps[1..tau as usize] {
            a = &a - &(alpha * &p.stacked_gradient(&step.x).unwrap());
        }
        let b = ((tau - 1) as f64 * alpha) * &(&end.d - &steps[0].d);
        dev_ab = dev_ab
            .max(terms.a.max_abs_diff(&a))
            .max(terms.b.max_abs_diff(&b));
        dev_next = dev_next
            .max(terms.next.x.max_abs_diff(&end.x))
            .max(terms.next.d.max_abs_diff(&end.d));
        s = end;
    }
    let elapsed = start.elapsed();
    verdict(
        dev_next <= 1e-10 && dev_ab <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("round map vs unrolled {dev_next:.3e}, A/B assembly {dev_ab:.3e} over 50 rounds in {elapsed:.2?}"),
    )
}

struct ConvergenceRun {
    r: Resolved,
    states: Vec<StackedState>,
    elapsed: Duration,
}

fn convergence_run() -> ConvergenceRun {
    let r = default_instance(1);
    let start = Instant::now();
    let states = fedcet_boundaries(&r, 200_000, 1e-8, 1e-6);
    ConvergenceRun {
        states,
        elapsed: start.elapsed(),
        r,
    }
}

fn criterion_3(run: &ConvergenceRun) -> Verdict {
    let r = &run.r;
    let cfg = SearchConfig::with_step_fraction(r.hp.mu(), r.hp.l(), r.hp.tau(), 0.001).unwrap();
    let expected = search(&cfg).unwrap().report.alpha;
    let last = run.states.last().unwrap();
    let e = fedcet::oracle::convergence_error(last, &r.fixed_point.optimum);
    let (rc, rg) = fedcet::oracle::fixed_point_residual(last, &r.problem).unwrap();
    let rounds = run.states.len() - 1;
    verdict(
        r.hp.alpha() == expected && r.hp.c() == c_max(r.hp.alpha(), r.hp.mu()) && e < 1e-8 && rc < 1e-6 && rg < 1e-6,
        format!(
            "alpha = {:.6e}, c = {:.6e}: e = {e:.3e}, r_consensus = {rc:.3e}, r_gradient = {rg:.3e} after {rounds} rounds in {:.2?}",
            r.hp.alpha(),
            r.hp.c(),
            run.elapsed
        ),
    )
}

fn criterion_4(run: &ConvergenceRun) -> Verdict {
    let r = &run.r;
    let rho = rho1(r.hp.alpha(), r.hp.mu(), r.hp.l(), r.hp.tau()).max(rho2(
        r.hp.alpha(),
        r.hp.mu(),
        r.hp.l(),
        r.hp.tau(),
        lambda_max_m(r.hp.alpha(), r.hp.c()),
    ));
    let samples: Vec<LyapunovSample> = run
        .states
        .iter()
        .map(|s| lyapunov(s, &r.fixed_point, &r.hp).unwrap())
        .collect();
    let worst_ratio = samples
        .windows(2)
        .map(|w| w[1].v / w[0].v)
        .fold(0.0f64, f64::max);
    let contracts = samples
        .windows(2)
        .all(|w| w[1].v <= rho * w[0].v * (1.0 + 1e-9));

    let dist0 = (&run.states[0].x - &r.fixed_point.x_star)
        .frob_norm()
        .powi(2);
    let mut envelope_ok = true;
    let mut worst_env = 0.0f64;
    for (k, s) in run.states.iter().enumerate() {
        let dist = (&s.x - &r.fixed_point.x_star).frob_norm().powi(2);
        let env = model_error_envelope(&r.hp, rho, k as u64, dist0, samples[0].term_d);
        envelope_ok &= dist <= env;
        worst_env = worst_env.max(dist / env);
    }
    verdict(
        contracts && envelope_ok && rho < 1.0,
        format!(
            "rho_pred = {rho:.7}, worst V(k+1)/V(k) = {worst_ratio:.4}, worst |x-x*|^2/envelope = {worst_env:.3e} over {} rounds",
            samples.len() - 1
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();

    let b = initial_bound(4.0, 4.0, 2).unwrap();
    ok &= (b - 0.00625).abs() <= 1e-15;
    notes.push(format!("bound(4,4,2) = {b}"));

    for (mu, l, tau) in [
        (4.0, 4.0, 2u32),
        (1.0, 1.0, 1),
        (1.0, 4.0, 3),
        (0.5, 2.0, 5),
    ] {
        let cfg = SearchConfig::with_step_fraction(mu, l, tau, 0.001).unwrap();
        let out = search(&cfg).unwrap();
        let a = out.report.alpha;
        let next = a + cfg.step;
        ok &= condition_c1(a, mu, l, tau) && condition_c2(a, mu, l, tau);
        ok &= !(condition_c1(next, mu, l, tau) && condition_c2(next, mu, l, tau));

        // Guard/rate equivalence on (0, 2/(τL)) at c = c_max(α).
        let top = 2.0 / (tau as f64 * l);
        let (mut checked, mut mismatches) = (0, 0);
        for j in 1..=1000 {
            let alpha = top * j as f64 / 1001.0;
            let g1 = guard_c1(alpha, mu, l, tau);
            let g2 = guard_c2(alpha, mu, l, tau);
            let r1 = rho1(alpha, mu, l, tau);
            let r2 = rho2(alpha, mu, l, tau, lambda_max_m(alpha, c_max(alpha, mu)));
            let band = 1e-12;
            if g1.abs() < band
                || g2.abs() < band
                || (r1 - 1.0).abs() < band
                || (r2 - 1.0).abs() < band
            {
                continue;
            }
            checked += 1;
            if (g1 > 0.0) != (r2 < 1.0) || (g2 > 0.0) != (r1 < 1.0) {
                mismatches += 1;
            }
        }
        ok &= mismatches == 0 && checked > 990;
        notes.push(format!(
            "({mu},{l},{tau}): alpha = {a:.6e}, {checked} grid points, {mismatches} mismatches"
        ));
    }
    verdict(ok, notes.join("; "))
}

fn criterion_6() -> Verdict {
    let r = default_instance(1);
    let (nc, n) = (r.problem.num_clients() as u64, r.problem.dim() as u64);
    let stop = StopRule::new(20, 0.0, 1e12).unwrap();
    let mut cet = FedCet::new(r.hp, r.x_init.clone(), DownlinkMode::Broadcast);
    let mut sc = Scaffold::new(
        r.hp.tau(),
        r.scaffold_lrs.0,
        r.scaffold_lrs.1,
        r.x_init.clone(),
        DownlinkMode::Broadcast,
    )
    .unwrap();
    let cet_run = run_algorithm(&mut cet, &r.problem, &stop, &r.fixed_point).unwrap();
    let sc_run = run_algorithm(&mut sc, &r.problem, &stop, &r.fixed_point).unwrap();
    let deltas = |records: &[fedcet::RoundRecord]| -> Vec<u64> {
        let mut prev = 0;
        records
            .iter()
            .map(|rec| {
                let total = rec.scalars_up_cum + rec.scalars_down_cum;
                let d = total - prev;
                prev = total;
                d
            })
            .collect()
    };
    let cet_d = deltas(&cet_run.records);
    let sc_d = deltas(&sc_run.records);
    let expected_cet = (nc + 1) * n;
    let ok = cet_d.iter().all(|&d| d == expected_cet)
        && sc_d.iter().all(|&d| d == 2 * expected_cet)
        && cet_run
            .records
            .iter()
            .all(|rec| rec.scalars_up_cum == (rec.k + 1) * nc * n)
        && sc_run
            .records
            .iter()
            .all(|rec| rec.scalars_down_cum == (rec.k + 1) * 2 * n)
        && cet_d.len() == 21
        && sc_d.len() == 21;
    verdict(
        ok,
        format!(
            "per-round scalars: fedcet {:?}, scaffold {:?} (expected {expected_cet} and {})",
            cet_d.iter().collect::<std::collections::BTreeSet<_>>(),
            sc_d.iter().collect::<std::collections::BTreeSet<_>>(),
            2 * expected_cet
        ),
    )
}

/// Fixed point of the FedAvg round map `x ↦ Mx + v` from the eigendecomposition
/// of `M`, built from each client's Hessian and linear term.
fn fedavg_fixed_point(problem: &FederatedProblem, tau: u32, alpha: f64) -> DVector<f64> {
    let n = problem.dim();
    let nc = problem.num_clients() as f64;
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut v = DVector::<f64>::zeros(n);
    for loss in problem.losses() {
        let q = loss.as_quadratic_risk().expect("quadratic clients");
        // ∇f_i(x) = 4x − 2 b̄_i.
        let h = DMatrix::<f64>::identity(n, n) * 4.0;
        let g = DVector::from_iterator(n, q.sample_mean().iter().map(|b| 2.0 * b));
        let step = DMatrix::<f64>::identity(n, n) - &h * alpha;
        let mut power = DMatrix::<f64>::identity(n, n);
        let mut offset = DVector::<f64>::zeros(n);
        for _ in 0..tau {
            offset = &step * offset + &g * alpha;
            power = &step * power;
        }
        m += power / nc;
        v += offset / nc;
    }
    let eig = SymmetricEigen::new(DMatrix::<f64>::identity(n, n) - m);
    let coords = eig.eigenvectors.transpose() * v;
    let scaled = DVector::from_iterator(
        n,
        coords
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, l)| c / l),
    );
    eig.eigenvectors * scaled
}

fn criterion_7() -> Verdict {
    let budget = 200u64;
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let r = default_instance(seed);
        let tau = r.hp.tau();
        let lr = 1.0 / (2.0 * tau as f64 * r.hp.l());
        let stop = StopRule::new(budget, 0.0, 1e12).unwrap();
        let mut avg = FedAvg::new(tau, lr, r.x_init.clone(), DownlinkMode::Broadcast).unwrap();
        let mut cet = FedCet::new(r.hp, r.x_init.clone(), DownlinkMode::Broadcast);
        let avg_run = run_algorithm(&mut avg, &r.problem, &stop, &r.fixed_point).unwrap();
        let cet_run = run_algorithm(&mut cet, &r.problem, &stop, &r.fixed_point).unwrap();
        let e_avg = avg_run.last().error;
        let e_cet = cet_run.last().error;
        let fp = fedavg_fixed_point(&r.problem, tau, lr);
        let x_avg = avg.model().unwrap();
        let fp_gap = x_avg
            .iter()
            .zip(fp.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let plateau = e_avg >= 100.0 * e_cet;
        ok &= plateau && fp_gap <= 1e-8;
        notes.push(format!(
            "seed {seed}: fedavg {e_avg:.3e} vs fedcet {e_cet:.3e} at round {budget} (ratio {:.2e}), |x_fedavg - x_fp| = {fp_gap:.1e}",
            e_avg / e_cet
        ));
    }
    verdict(ok, notes.join("; "))
}

fn criterion_8() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let r = default_instance(seed);
        let stop = StopRule::new(200_000, 1e-10, 1e12)
            .unwrap()
            .with_residual_tol(1e-6)
            .unwrap();
        let mut cet = FedCet::new(r.hp, r.x_init.clone(), DownlinkMode::Broadcast);
        let mut sc = Scaffold::new(
            r.hp.tau(),
            1.0,
            1.0 / (81.0 * r.hp.tau() as f64 * r.hp.l()),
            r.x_init.clone(),
            DownlinkMode::Broadcast,
        )
        .unwrap();
        let cet_run = run_algorithm(&mut cet, &r.problem, &stop, &r.fixed_point).unwrap();
        let sc_run = run_algorithm(&mut sc, &r.problem, &stop, &r.fixed_point).unwrap();
        let k = cet_run.last().k.min(sc_run.last().k) as usize;
        let (ec, es) = (cet_run.records[k].error, sc_run.records[k].error);
        ok &= ec <= es && cet_run.status == RunStatus::Converged;
        notes.push(format!(
            "seed {seed}: round {k} fedcet {ec:.3e} <= scaffold {es:.3e}"
        ));
    }
    verdict(ok, notes.join("; "))
}

fn criterion_9() -> Verdict {
    let start = Instant::now();
    let r = default_instance(1);
    let (p, hp) = (&r.problem, &r.hp);
    let mut notes = Vec::new();

    // d-mean conservation on the protocol path, every iteration.
    let proto = fedcet_iterates(p, hp, &r.x_init, 400).unwrap();
    let d_mean = proto.iter().map(|s| s.d_mean_inf()).fold(0.0, f64::max);
    notes.push(format!("d-mean {d_mean:.1e}"));
    let mut ok = d_mean <= 1e-12;

    // d-constancy inside rounds: exact on the matrix form; on the protocol
    // path up to the roundoff of reconstructing d from two iterates.
    let matrix = matrix_trace(p, hp, &r.x_init, 400).unwrap();
    let tau = hp.tau() as usize;
    let mut oracle_gap = 0.0f64;
    let mut proto_gap = 0.0f64;
    let mut proto_allow = f64::INFINITY;
    for t in 0..=400 {
        if t % tau != 0 {
            let base = t - t % tau;
            oracle_gap = oracle_gap.max(matrix[t].d.max_abs_diff(&matrix[base].d));
            proto_gap = proto_gap.max(proto[t].d.max_abs_diff(&proto[base].d));
            let scale = proto[t].x.max_abs().max(proto[base].x.max_abs());
            proto_allow = proto_allow.min(64.0 * f64::EPSILON * scale / hp.alpha());
        }
    }
    ok &= oracle_gap <= 1e-14 && proto_gap <= proto_allow;
    notes.push(format!(
        "d-constancy matrix {oracle_gap:.1e}, protocol {proto_gap:.1e} (allowed {proto_allow:.1e})"
    ));

    // Homogeneous data reduces to gradient descent.
    let q = p.loss(0).as_quadratic_risk().unwrap().clone();
    let homo = FederatedProblem::from_quadratic_risks(vec![q.clone(); 5]).unwrap();
    let hhp = HyperParams::for_problem(&homo, 3, 0.02, None).unwrap();
    let x0 = ModelVec::new(vec![1.5; homo.dim()]).unwrap();
    let trace = fedcet_iterates(&homo, &hhp, &StackedMat::broadcast(&x0, 5), 60).unwrap();
    let mut gd = x0.as_array().clone();
    let gd_step = |x: &ndarray::Array1<f64>| x - &((x * 4.0 - &(q.sample_mean() * 2.0)) * 0.02);
    gd = gd_step(&gd);
    gd = gd_step(&gd);
    let mut homo_gap = 0.0f64;
    for s in &trace {
        for row in s.x.rows() {
            homo_gap = homo_gap.max((&row - &gd).iter().fold(0.0f64, |m, e| m.max(e.abs())));
        }
        gd = gd_step(&gd);
    }
    ok &= homo_gap <= 1e-12;
    notes.push(format!("homogeneous vs GD {homo_gap:.1e}"));

    // Finite-difference gradient checks.
    let mut fd = 0.0f64;
    let mut rng = fedcet::experiment::UniformStream::new(77);
    for loss in p.losses() {
        let x = ModelVec::new((0..p.dim()).map(|_| rng.next_in(-5.0, 5.0)).collect()).unwrap();
        fd = fd.max(fd_relative_error(loss, &x).unwrap());
    }
    ok &= fd <= 1e-6;
    notes.push(format!("fd rel err {fd:.1e}"));

    // Centering projection and weighted-norm eigenvalue identity.
    let a = StackedMat::new(ndarray::Array2::from_shape_fn((10, 60), |_| {
        rng.next_in(-3.0, 3.0)
    }))
    .unwrap();
    let once = center_project(&a);
    let idem = center_project(&once).max_abs_diff(&once);
    let (wa, wb) = (0.3, 2.0);
    let lhs = weighted_norm_sq(&once, WeightSpec::centering(wa, wb).unwrap()).unwrap();
    let rhs = (wa + wb) * once.frob_norm().powi(2);
    let eig = (lhs - rhs).abs() / rhs;
    ok &= idem <= 1e-14 && eig <= 1e-12;
    notes.push(format!(
        "projection idempotence {idem:.1e}, eigenvalue identity {eig:.1e}"
    ));

    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(10);
    notes.push(format!("{elapsed:.2?}"));
    verdict(ok, notes.join("; "))
}

fn criterion_10(run: &ConvergenceRun) -> Verdict {
    let r = &run.r;
    let mut worst = 0.0f64;
    let mut ok = true;
    for s in &run.states[..run.states.len() - 1] {
        let terms = oracle_round_terms(s, &r.problem, &r.hp).unwrap();
        let db = drift_bound(s, &terms, &r.fixed_point, &r.hp).unwrap();
        ok &= db.measured <= db.bound;
        if db.bound > 0.0 {
            worst = worst.max(db.measured / db.bound);
        }
    }
    verdict(
        ok,
        format!(
            "worst measured/bound = {worst:.3e} over {} rounds",
            run.states.len() - 1
        ),
    )
}

fn main() {
    let run = convergence_run();
    let results: Vec<(&str, Verdict)> = vec![
        ("1 protocol vs matrix form", criterion_1()),
        ("2 round map vs unrolled steps", criterion_2()),
        ("3 exact convergence", criterion_3(&run)),
        ("4 Lyapunov contraction", criterion_4(&run)),
        ("5 learning-rate search", criterion_5()),
        ("6 communication per round", criterion_6()),
        ("7 FedAvg client drift", criterion_7()),
        ("8 FedCET vs SCAFFOLD", criterion_8()),
        ("9 invariant suite", criterion_9()),
        ("10 drift-term bound", criterion_10(&run)),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!(
            "{} criterion {name}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.passed);
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
