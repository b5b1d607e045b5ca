//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines are always shown. Exits nonzero when a
//! criterion fails, unless it is listed in `KNOWN_RED`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ntklab::data::uniform_sphere;
use ntklab::harness::experiments::{
    exp_erm, exp_init_lemmas, exp_kernel, exp_kernel_complexity, exp_ntk_lb, exp_random_label,
    exp_sgd, exp_xor_margin,
};
use ntklab::harness::{run_with_threads, Experiment, ExperimentConfig, RunArtifacts, Status};
use ntklab::kernels::{gram, GramMatrix, KernelFn};
use ntklab::margin::{
    solve_margin, witness_margins, witness_supnorm_check, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use ntklab::model::{
    empirical_risk, init_network, preactivations, risk_gradient, Dataset, LabeledExample,
};
use ntklab::rng::{seeded, substream};
use rand::Rng as _;

/// Criteria that do not hold at desk scale; see the project notes.
const KNOWN_RED: &[&str] = &["kernel_sample_complexity"];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    Outcome {
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn config(e: Experiment, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::resolve(e, None, &o).expect("valid config")
}

fn failed_checks(a: &RunArtifacts) -> String {
    let bad: Vec<String> = a
        .summary
        .checks
        .iter()
        .filter(|c| c.status != Status::Pass)
        .map(|c| format!("{}={:.4e}", c.name, c.observed))
        .collect();
    if bad.is_empty() {
        "all checks pass".into()
    } else {
        bad.join("; ")
    }
}

fn check_names(a: &RunArtifacts, prefix: &str) -> (bool, String) {
    let relevant: Vec<_> = a
        .summary
        .checks
        .iter()
        .filter(|c| c.name.starts_with(prefix))
        .collect();
    let ok = !relevant.is_empty() && relevant.iter().all(|c| c.status == Status::Pass);
    let detail = relevant
        .iter()
        .map(|c| format!("{}={:.4e}", c.name, c.observed))
        .collect::<Vec<_>>()
        .join("; ");
    (ok, detail)
}

fn gradient_matches_finite_differences() -> (bool, String) {
    let (d, m, n, h) = (5, 8, 6, 1e-5);
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut r = seeded(11);
    while instances < 20 {
        let params = init_network(m, d, &mut r).unwrap();
        let examples: Vec<LabeledExample> = (0..n)
            .map(|_| {
                let y = if r.random::<bool>() { 1.0 } else { -1.0 };
                LabeledExample::new(uniform_sphere(d, &mut r), y).unwrap()
            })
            .collect();
        let data = Dataset::new(examples).unwrap();
        let kink_gap = preactivations(params.weights(), &data)
            .iter()
            .fold(f64::INFINITY, |a, z| a.min(z.abs()));
        if kink_gap < 1e-3 {
            continue;
        }
        instances += 1;
        let g = risk_gradient(&params, &data).unwrap();
        for s in 0..m {
            for k in 0..d {
                let mut plus = params.weights().clone();
                let mut minus = params.weights().clone();
                plus[[s, k]] += h;
                minus[[s, k]] -= h;
                let fp = empirical_risk(&params.with_weights(plus).unwrap(), &data).unwrap();
                let fm = empirical_risk(&params.with_weights(minus).unwrap(), &data).unwrap();
                worst = worst.max(((fp - fm) / (2.0 * h) - g[[s, k]]).abs());
            }
        }
    }
    (
        worst <= 1e-6,
        format!("max |fd - grad| = {worst:.3e} over 20 instances"),
    )
}

fn objective(h: &DMatrix<f64>, q: &[f64]) -> f64 {
    let v = DVector::from_column_slice(q);
    (v.transpose() * h * &v)[(0, 0)]
}

fn quad(h: &[f64], q: &[f64]) -> f64 {
    let n = q.len();
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = h[i * n..(i + 1) * n]
            .iter()
            .zip(q)
            .map(|(a, b)| a * b)
            .sum();
        total += q[i] * row;
    }
    total
}

/// Grid over all but the last two weights; the last two are optimized exactly.
fn grid_minimum(h: &DMatrix<f64>, steps: usize) -> f64 {
    let n = h.nrows();
    let flat: Vec<f64> = (0..n * n).map(|k| h[(k / n, k % n)]).collect();
    let h = &flat[..];
    let mut best = f64::INFINITY;
    let mut prefix = vec![0usize; n.saturating_sub(2)];
    let mut q = vec![0.0; n];
    loop {
        let used: usize = prefix.iter().sum();
        if used <= steps {
            for (i, p) in prefix.iter().enumerate() {
                q[i] = *p as f64 / steps as f64;
            }
            let rest = 1.0 - used as f64 / steps as f64;
            best = best.min(best_on_segment(h, &mut q, rest));
        }
        // odometer over the prefix
        let mut i = 0;
        loop {
            if i == prefix.len() {
                return best;
            }
            prefix[i] += 1;
            if prefix.iter().sum::<usize>() <= steps {
                break;
            }
            prefix[i] = 0;
            i += 1;
        }
    }
}

/// Minimum over `q[n-2] = t`, `q[n-1] = rest - t`, `t ∈ [0, rest]`.
fn best_on_segment(h: &[f64], q: &mut [f64], rest: f64) -> f64 {
    let n = q.len();
    if n == 1 {
        q[0] = 1.0;
        return quad(h, q);
    }
    let (a, b) = (n - 2, n - 1);
    q[a] = 0.0;
    q[b] = rest;
    let f0 = quad(h, q);
    q[a] = rest;
    q[b] = 0.0;
    let f1 = quad(h, q);
    q[a] = rest / 2.0;
    q[b] = rest / 2.0;
    let fm = quad(h, q);
    // f(s) = f0 + (f1 - f0) s + c s(s - 1) with s = t / rest
    let c = 2.0 * (f0 + f1) - 4.0 * fm;
    let mut best = f0.min(f1);
    if c > 0.0 {
        let s = (0.5 - (f1 - f0) / (2.0 * c)).clamp(0.0, 1.0);
        best = best.min(f0 + (f1 - f0) * s + c * s * (s - 1.0));
    }
    best
}

/// Exact minimum by enumerating supports and checking optimality conditions.
fn kkt_minimum(h: &DMatrix<f64>) -> Option<f64> {
    let n = h.nrows();
    let mut best: Option<f64> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let hs = DMatrix::from_fn(idx.len(), idx.len(), |i, j| h[(idx[i], idx[j])]);
        let Some(inv) = hs.try_inverse() else {
            continue;
        };
        let w = inv * DVector::from_element(idx.len(), 1.0);
        let total = w.sum();
        if total.abs() < 1e-14 {
            continue;
        }
        let mut q = vec![0.0; n];
        for (k, i) in idx.iter().enumerate() {
            q[*i] = w[k] / total;
        }
        if q.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let val = objective(h, &q);
        let hq = h * DVector::from_column_slice(&q);
        if (0..n).all(|i| hq[i] >= val - 1e-10) {
            best = Some(best.map_or(val, |b: f64| b.min(val)));
        }
    }
    best
}

struct MarginInstance {
    data: Dataset,
    gram: GramMatrix,
}

fn margin_instances() -> Vec<MarginInstance> {
    (0..20u64)
        .map(|i| {
            let n = 2 + (i as usize % 5);
            let mut r = substream(5, &["acceptance", "margin"], &[i]);
            let d = 3 + (i as usize % 4);
            let examples = (0..n)
                .map(|_| {
                    let y = if r.random::<bool>() { 1.0 } else { -1.0 };
                    LabeledExample::new(uniform_sphere(d, &mut r), y).unwrap()
                })
                .collect();
            let data = Dataset::new(examples).unwrap();
            let gram = gram(&KernelFn::K1, &data).unwrap();
            MarginInstance { data, gram }
        })
        .collect()
}

fn signed_gram(inst: &MarginInstance) -> DMatrix<f64> {
    let y = inst.data.labels();
    let n = y.len();
    DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * inst.gram.get(i, j))
}

fn margin_oracle() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut ok = true;
    for inst in margin_instances() {
        let res = solve_margin(
            &inst.gram,
            inst.data.labels(),
            DEFAULT_TOL,
            DEFAULT_MAX_ITERS,
        )
        .unwrap();
        let h = signed_gram(&inst);
        let oracle = if inst.data.len() <= 5 {
            grid_minimum(&h, 500)
        } else {
            match kkt_minimum(&h) {
                Some(v) => v,
                None => {
                    ok = false;
                    continue;
                }
            }
        };
        worst = worst.max((res.gamma - oracle.max(0.0).sqrt()).abs());
        worst_gap = worst_gap.max(res.duality_gap);
        ok &= res.converged;
    }
    (
        ok && worst <= 1e-3 && worst_gap <= 1e-8,
        format!("max |gamma - oracle| = {worst:.3e}, max gap = {worst_gap:.3e}"),
    )
}

fn witness() -> (bool, String) {
    let mut worst_margin = f64::INFINITY;
    let mut worst_sup = 0.0f64;
    let mut checked = 0;
    let mut instances = margin_instances();
    let xor =
        ntklab::data::make_xor2(5, ntklab::data::SamplingMode::Exhaustive, &mut seeded(0)).unwrap();
    instances.push(MarginInstance {
        gram: gram(&KernelFn::K1, &xor).unwrap(),
        data: xor,
    });
    for (i, inst) in instances.iter().enumerate() {
        let res = solve_margin(
            &inst.gram,
            inst.data.labels(),
            DEFAULT_TOL,
            DEFAULT_MAX_ITERS,
        )
        .unwrap();
        if !res.converged || res.gamma <= DEFAULT_TOL {
            continue;
        }
        checked += 1;
        let wm = witness_margins(&res, &inst.gram, inst.data.labels()).unwrap();
        let min_wm = wm.iter().copied().fold(f64::INFINITY, f64::min);
        worst_margin = worst_margin.min(min_wm - res.gamma);
        let mut r = substream(6, &["acceptance", "supnorm"], &[i as u64]);
        worst_sup = worst_sup.max(witness_supnorm_check(&res, &inst.data, 20_000, &mut r).unwrap());
    }
    (
        checked > 0 && worst_margin >= -1e-3 && worst_sup <= 1.0 + 1e-9,
        format!("{checked} instances; min(witness - gamma) = {worst_margin:.3e}; max sup-norm = {worst_sup:.6}"),
    )
}

fn status_line(a: &RunArtifacts) -> (bool, String) {
    (a.status() == Status::Pass, failed_checks(a))
}

fn determinism() -> (bool, String) {
    let small: Vec<(Experiment, Vec<&str>)> = vec![
        (
            Experiment::Train,
            vec!["widths=[16,32]", "n=20", "t_max=40", "stop_at_target=false"],
        ),
        (
            Experiment::Gen,
            vec!["n=40", "m=16", "t_max=30", "held_out=1000"],
        ),
        (
            Experiment::Sgd,
            vec!["n=60", "m=16", "held_out=40", "replicates=3"],
        ),
        (Experiment::Margin, vec!["d=5", "mc_samples=500"]),
        (Experiment::Kernel, vec!["trials=6", "mc_samples=2000"]),
        (Experiment::XorMargin, vec!["d=4", "mc_samples=2000"]),
        (Experiment::NtkLb, vec!["d=20", "m=3", "trials=200"]),
        (Experiment::RandomLabel, vec!["d=5", "trials=12"]),
        (
            Experiment::KernelComplexity,
            vec!["dims=[4,5]", "replicates=3", "max_steps=3000"],
        ),
        (
            Experiment::InitLemmas,
            vec!["widths=[64,128]", "trials=6", "mc_samples=5000"],
        ),
    ];
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (e, o) in small {
        let c = config(e, &o);
        let one = run_with_threads(&c, Some(1)).unwrap().files().unwrap();
        let four = run_with_threads(&c, Some(4)).unwrap().files().unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_with_threads(&c, Some(2))
            .unwrap()
            .write_to(dir.path())
            .unwrap();
        let on_disk: Vec<(String, String)> = one
            .iter()
            .map(|(name, _)| {
                (
                    name.clone(),
                    std::fs::read_to_string(dir.path().join(name)).unwrap(),
                )
            })
            .collect();
        compared += one.len();
        if one != four || one != on_disk {
            mismatched.push(e.name());
        }
    }
    (
        mismatched.is_empty(),
        format!("{compared} files across 10 experiments; mismatched: {mismatched:?}"),
    )
}

fn main() {
    let mut outcomes = Vec::new();
    outcomes.push(timed(
        "gradient_finite_differences",
        gradient_matches_finite_differences,
    ));
    outcomes.push(timed("kernel_closed_forms", || {
        status_line(&exp_kernel(&config(Experiment::Kernel, &[])).unwrap())
    }));
    outcomes.push(timed("margin_solver_oracle", margin_oracle));
    outcomes.push(timed("kernel_witness", witness));
    outcomes.push(timed("xor_population_margin", || {
        let d3 = exp_xor_margin(&config(Experiment::XorMargin, &["d=3"])).unwrap();
        let d8 = exp_xor_margin(&config(Experiment::XorMargin, &["d=8"])).unwrap();
        let ok = d3.status() == Status::Pass && d8.status() == Status::Pass;
        (
            ok,
            format!("d=3: {}; d=8: {}", failed_checks(&d3), failed_checks(&d8)),
        )
    }));
    outcomes.push(timed("random_label_margin", || {
        let a = exp_random_label(&config(Experiment::RandomLabel, &[])).unwrap();
        let frac = a.summary.observed["fraction_below"]
            .as_f64()
            .unwrap_or(f64::NAN);
        (
            a.status() == Status::Pass,
            format!("fraction below threshold = {frac:.3}"),
        )
    }));
    outcomes.push(timed("ntk_width_lower_bound", || {
        status_line(&exp_ntk_lb(&config(Experiment::NtkLb, &[])).unwrap())
    }));
    outcomes.push(timed("initialization_lemmas", || {
        status_line(&exp_init_lemmas(&config(Experiment::InitLemmas, &[])).unwrap())
    }));

    let start = Instant::now();
    let erm = exp_erm(&config(Experiment::Train, &[])).unwrap();
    let erm_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let sgd = exp_sgd(&config(Experiment::Sgd, &[])).unwrap();
    let sgd_secs = start.elapsed().as_secs_f64();

    outcomes.push(timed("squared_distance_inequalities", || {
        let lemmas: Vec<_> = erm
            .lemma_checks
            .iter()
            .chain(&sgd.lemma_checks)
            .filter(|l| l.lemma.starts_with("squared_dist"))
            .collect();
        let min = lemmas
            .iter()
            .map(|l| l.observed)
            .fold(f64::INFINITY, f64::min);
        (
            lemmas.len() == 8 && lemmas.iter().all(|l| l.pass),
            format!("{} monitored runs; min slack = {min:.3e}", lemmas.len()),
        )
    }));
    let mut trends = timed("erm_trends", || {
        let (a, da) = check_names(&erm, "average_risk");
        let (b, db) = check_names(&erm, "move_over_bound");
        let (c, dc) = check_names(&erm, "scaled_move_spread");
        (a && b && c, format!("{da}; {db}; {dc}"))
    });
    trends.seconds += erm_secs;
    outcomes.push(trends);
    let mut online = timed("sgd_online", || {
        let (a, da) = check_names(&sgd, "running_test_error");
        let (b, db) = check_names(&sgd, "gen_sgd_frequency");
        (a && b, format!("{da}; {db}"))
    });
    online.seconds += sgd_secs;
    outcomes.push(online);
    outcomes.push(timed("kernel_sample_complexity", || {
        let a = exp_kernel_complexity(&config(Experiment::KernelComplexity, &[])).unwrap();
        let slope = a.summary.observed["slope"].as_f64().unwrap_or(f64::NAN);
        (
            a.status() == Status::Pass,
            format!(
                "median samples {}; slope = {slope:.3}",
                a.summary.observed["median_samples"]
            ),
        )
    }));
    outcomes.push(timed("determinism_across_threads", determinism));

    let mut unexpected = 0;
    for o in &outcomes {
        let label = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_RED.contains(&o.name) {
            " (known)"
        } else {
            ""
        };
        println!("{label} {}{note} [{:.1}s] {}", o.name, o.seconds, o.detail);
        if !o.pass && !KNOWN_RED.contains(&o.name) {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
