//! One function per experiment. Each is deterministic given its config:
//! every random quantity comes from a labelled substream of `config.seed`.

use ndarray::Array2;
use rand::seq::index;
use rayon::prelude::*;
use serde_json::json;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::data::{
    make_linear, make_xor2, noise_pattern, uniform_sphere, xor2_point, DistributionSpec,
    SamplingMode, XOR2_PROTOTYPES,
};
use crate::error::{NtkError, Result};
use crate::harness::artifacts::{
    render_csv, render_trace, Check, CsvCell, LemmaCheck, RunArtifacts, Status, Summary,
};
use crate::harness::config::{DistributionKind, Experiment, ExperimentConfig};
use crate::kernels::{gram, k1, k1_mc, k2, k2_mc, kernel_sgd, HeldOut, KernelFn, KernelSgdConfig};
use crate::margin::{
    eigen_margin_lower_bound, random_label_experiment, solve_margin, witness_margins,
    witness_supnorm_check, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::model::{
    dot, init_network, l2_norm, preactivations, BatchEval, Dataset, LabeledExample, NetworkParams,
};
use crate::optimize::{
    gd_train, sgd_train, GdOptions, SgdOptions, SquaredDistMonitor, StepMonitor, StepRecord,
    TheoremConstants, SLACK_TOL,
};
use crate::rng::substream;
use crate::separators::{
    build_u_bar, finite_margin, init_output_check, init_output_threshold,
    near_activation_fractions, ntk_lb_simulation, population_margin_mc, SeparatorFn,
};
use crate::stats::{frequency_floor, ls_slope, median};

/// Runs the experiment named in `config`.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    match config.experiment {
        Experiment::Train => exp_erm(config),
        Experiment::Gen => exp_gen(config),
        Experiment::Sgd => exp_sgd(config),
        Experiment::Margin => exp_margin(config),
        Experiment::Kernel => exp_kernel(config),
        Experiment::XorMargin => exp_xor_margin(config),
        Experiment::NtkLb => exp_ntk_lb(config),
        Experiment::RandomLabel => exp_random_label(config),
        Experiment::KernelComplexity => exp_kernel_complexity(config),
        Experiment::InitLemmas => exp_init_lemmas(config),
    }
}

/// [`run`] inside a dedicated pool of `threads` workers (all cores when `None`).
pub fn run_with_threads(config: &ExperimentConfig, threads: Option<usize>) -> Result<RunArtifacts> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| NtkError::Config(format!("thread pool: {e}")))?;
    pool.install(|| run(config))
}

/// Parses `NTKLAB_THREADS`.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("NTKLAB_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| NtkError::Config(format!("NTKLAB_THREADS=`{v}` is not a count"))),
        Err(_) => Ok(None),
    }
}

fn summary(
    config: &ExperimentConfig,
    claim: &str,
    parameters: serde_json::Value,
    observed: serde_json::Value,
    checks: Vec<Check>,
) -> Summary {
    let status = Status::combine(checks.iter().map(|c| c.status));
    Summary {
        experiment: config.experiment.name().into(),
        claim: claim.into(),
        parameters,
        observed,
        checks,
        status,
    }
}

fn artifacts(config: &ExperimentConfig, summary: Summary) -> RunArtifacts {
    RunArtifacts {
        config: config.clone(),
        summary,
        lemma_checks: Vec::new(),
        train_trace: None,
        extra: Vec::new(),
    }
}

fn lemma(
    name: &str,
    parameters: serde_json::Value,
    threshold: f64,
    observed: f64,
    pass: bool,
) -> LemmaCheck {
    LemmaCheck {
        lemma: name.into(),
        parameters,
        threshold,
        observed,
        pass,
    }
}

fn tag(config: &ExperimentConfig) -> &'static str {
    match config.experiment {
        Experiment::Train => "erm",
        Experiment::Gen => "gen",
        Experiment::Sgd => "sgd",
        Experiment::Margin => "margin",
        Experiment::Kernel => "kernel",
        Experiment::XorMargin => "xor_margin",
        Experiment::NtkLb => "ntk_lb",
        Experiment::RandomLabel => "random_label",
        Experiment::KernelComplexity => "kernel_complexity",
        Experiment::InitLemmas => "init_lemmas",
    }
}

fn need_linear(config: &ExperimentConfig) -> Result<()> {
    if config.distribution != DistributionKind::Linear {
        return Err(NtkError::Config(format!(
            "`{}` trains on the linear distribution",
            config.experiment
        )));
    }
    Ok(())
}

/// Linear-margin training set and its planted direction.
fn linear_training_set(config: &ExperimentConfig, n: usize) -> Result<(Dataset, Vec<f64>)> {
    make_linear(
        config.d,
        config.gamma0,
        n,
        &mut substream(config.seed, &[tag(config), "data"], &[]),
    )
}

/// A finite dataset for the margin experiments.
fn finite_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let mut r = substream(config.seed, &[tag(config), "data"], &[]);
    match config.distribution {
        DistributionKind::Xor2 => {
            let mode = if config.exhaustive {
                SamplingMode::Exhaustive
            } else {
                SamplingMode::Iid(config.n)
            };
            make_xor2(config.d, mode, &mut r)
        }
        DistributionKind::Linear => Ok(make_linear(config.d, config.gamma0, config.n, &mut r)?.0),
    }
}

fn linear_constants(config: &ExperimentConfig, n: usize) -> Result<TheoremConstants> {
    TheoremConstants::new(n, config.delta, config.eps, config.gamma0 / 2.0, config.eta)
}

/// `W(0) + λŪ`.
fn anchor(init: &Array2<f64>, u_bar: &Array2<f64>, lambda: f64) -> Array2<f64> {
    init + &(u_bar * lambda)
}

/// GD on the linear distribution across a width sweep: average risk,
/// movement bound, movement scaling and the squared-distance inequality.
pub fn exp_erm(config: &ExperimentConfig) -> Result<RunArtifacts> {
    need_linear(config)?;
    let (data, u) = linear_training_set(config, config.n)?;
    let constants = linear_constants(config, data.len())?;
    let t_max = config.t_max.unwrap_or(constants.t_steps as usize);
    let sep = SeparatorFn::linear(u)?;
    let widths = config.width_list();

    let mut checks = Vec::new();
    let mut lemmas = Vec::new();
    let mut per_width = Vec::new();
    let mut traces = Vec::new();
    let mut scaled_moves = Vec::new();
    for &m in &widths {
        let mut params = init_network(
            m,
            config.d,
            &mut substream(config.seed, &["erm", "init"], &[m as u64]),
        )?;
        let init = params.snapshot();
        let u_bar = build_u_bar(&init, &sep)?.into_matrix();
        let mut anchored =
            SquaredDistMonitor::new(anchor(init.weights(), &u_bar, constants.lambda));
        let mut origin = SquaredDistMonitor::new(init.weights().clone());
        let mut opts = GdOptions::new(config.eta, t_max);
        opts.move_bound = constants.move_bound(m);
        opts.u_bar = Some(u_bar);
        if config.stop_at_target {
            opts.stop_average_below = Some(config.eps);
        }
        let trace = {
            let mut monitors: [&mut dyn StepMonitor; 2] = [&mut anchored, &mut origin];
            gd_train(&mut params, &init, &data, &opts, &mut monitors)?
        };
        let reached = trace.first_average_below(config.eps);
        let steps = trace.records.len();
        let final_average = trace.average_risk(steps);
        let max_ratio = trace
            .records
            .iter()
            .map(|r| r.max_row_move / r.move_bound)
            .fold(0.0, f64::max);
        checks.push(Check::at_most(
            format!("average_risk[m={m}]"),
            final_average,
            config.eps,
        ));
        checks.push(Check::at_most(
            format!("move_over_bound[m={m}]"),
            max_ratio,
            1.0,
        ));
        for (name, mon) in [("anchor_lambda_u", &anchored), ("anchor_init", &origin)] {
            let slack = mon.min_slack();
            checks.push(Check::at_least(
                format!("squared_dist_slack[{name};m={m}]"),
                slack,
                -SLACK_TOL,
            ));
            lemmas.push(lemma(
                "squared_dist",
                json!({"m": m, "anchor": name, "steps": steps}),
                -SLACK_TOL,
                slack,
                slack >= -SLACK_TOL,
            ));
        }
        per_width.push(json!({
            "m": m,
            "steps_run": steps,
            "first_average_below_eps": reached,
            "final_average_risk": final_average,
            "final_risk": trace.records[steps - 1].risk,
            "max_row_move": trace.records[steps - 1].max_row_move,
            "move_bound": opts.move_bound,
            "min_margin_u_init": trace.records[0].min_margin_u,
            "width_sufficient": constants.width_sufficient(m),
            "k_min_risk": trace.k_min_risk,
        }));
        traces.push((m, trace));
    }
    // movement scaling is compared at the last step every run reached
    let common = traces
        .iter()
        .map(|(_, t)| t.records.len())
        .min()
        .unwrap_or(1)
        - 1;
    for (m, t) in &traces {
        scaled_moves.push(t.records[common].max_row_move * (*m as f64).sqrt());
    }
    if widths.len() > 1 {
        let hi = scaled_moves
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let lo = scaled_moves.iter().copied().fold(f64::INFINITY, f64::min);
        checks.push(Check::at_most("scaled_move_spread", hi / lo, 2.0));
    }
    let observed = json!({
        "widths": per_width,
        "movement_compare_step": common,
        "scaled_moves": scaled_moves,
    });
    let parameters = json!({
        "n": data.len(),
        "gamma": constants.gamma,
        "lambda": constants.lambda,
        "big_m": constants.big_m,
        "t_steps": constants.t_steps,
        "t_max": t_max,
    });
    let mut out = artifacts(
        config,
        summary(
            config,
            "erm_risk_and_movement",
            parameters,
            observed,
            checks,
        ),
    );
    out.lemma_checks = lemmas;
    out.train_trace = Some(render_trace(&traces[0].1.records));
    if traces.len() > 1 {
        for (m, t) in &traces {
            out.extra
                .push((format!("train_trace_m{m}.csv"), render_trace(&t.records)));
        }
    }
    Ok(out)
}

/// Upper end of the exact (Clopper-Pearson) interval for `k` of `n` at level `1 - alpha`.
pub fn binomial_upper(k: usize, n: usize, alpha: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    Beta::new(k as f64 + 1.0, (n - k) as f64)
        .expect("valid shape")
        .inverse_cdf(1.0 - alpha / 2.0)
}

/// Held-out misclassification rate and `Q̂`.
fn score(params: &NetworkParams, data: &Dataset) -> Result<(f64, f64, usize)> {
    let eval = BatchEval::new(params, data)?;
    let wrong = eval
        .outputs
        .iter()
        .zip(data.labels())
        .filter(|(f, y)| *y * **f <= 0.0)
        .count();
    Ok((wrong as f64 / data.len() as f64, eval.qhat, wrong))
}

/// GD on `n` samples, minimum-risk iterate selection, held-out test error
/// and the terms of the generalization bound.
pub fn exp_gen(config: &ExperimentConfig) -> Result<RunArtifacts> {
    need_linear(config)?;
    if config.held_out < 1000 {
        return Err(NtkError::Config("held_out must be at least 1000".into()));
    }
    let (data, u) = linear_training_set(config, config.n)?;
    let spec = DistributionSpec::linear(u, config.gamma0)?;
    let test = spec.sample_n(
        config.held_out,
        &mut substream(config.seed, &["gen", "held_out"], &[]),
    );
    let constants = linear_constants(config, data.len())?;
    let t_max = config.t_max.unwrap_or(constants.t_steps as usize);
    let m = config.m;
    let mut params = init_network(
        m,
        config.d,
        &mut substream(config.seed, &["gen", "init"], &[]),
    )?;
    let init = params.snapshot();
    let mut opts = GdOptions::new(config.eta, t_max);
    opts.move_bound = constants.move_bound(m);
    if config.stop_at_target {
        opts.stop_average_below = Some(config.eps);
    }
    let trace = gd_train(&mut params, &init, &data, &opts, &mut [])?;
    let k = trace.k_min_risk;
    let w_k = trace.snapshot(k).expect("selected iterate is kept").clone();
    let selected = params.with_weights(w_k)?;
    let (test_error, q_test, wrong) = score(&selected, &test)?;
    let upper = binomial_upper(wrong, test.len(), 0.05);

    let (n, g, delta, eps) = (data.len() as f64, constants.gamma, config.delta, config.eps);
    let complexity_term =
        16.0 * ((2.0 * (4.0 * n / delta).ln()).sqrt() + (4.0 / eps).ln()) / (g * g * n.sqrt());
    let concentration_term = 6.0 * ((2.0 / delta).ln() / (2.0 * n)).sqrt();
    let bound = 2.0 * eps + complexity_term + concentration_term;

    let checks = vec![
        Check::at_most("test_error_at_k", test_error, config.eps),
        Check::at_most(
            "test_error_vs_2q",
            test_error,
            2.0 * q_test + (upper - test_error),
        ),
    ];
    let observed = json!({
        "k": k,
        "steps_run": trace.records.len(),
        "train_risk_at_k": trace.records[k].risk,
        "test_error": test_error,
        "test_error_upper_95": upper,
        "q_test": q_test,
        "bound": bound,
        "bound_terms": {
            "two_eps": 2.0 * eps,
            "complexity": complexity_term,
            "concentration": concentration_term,
        },
    });
    let parameters = json!({
        "n": data.len(),
        "held_out": test.len(),
        "m": m,
        "gamma": g,
        "lambda": constants.lambda,
        "t_steps": constants.t_steps,
        "t_max": t_max,
    });
    let mut out = artifacts(
        config,
        summary(config, "gen_min_risk_iterate", parameters, observed, checks),
    );
    out.train_trace = Some(render_trace(&trace.records));
    Ok(out)
}

struct SgdRun {
    running_error: f64,
    final_error: f64,
    lhs: f64,
    rhs: f64,
    slacks: Option<(f64, f64)>,
    records: Vec<StepRecord>,
}

fn sgd_replicate(config: &ExperimentConfig, replicate: u64, monitored: bool) -> Result<SgdRun> {
    let s = config.seed;
    let u = uniform_sphere(
        config.d,
        &mut substream(s, &["sgd", "direction"], &[replicate]),
    );
    let spec = DistributionSpec::linear(u.clone(), config.gamma0)?;
    let test = spec.sample_n(
        config.held_out,
        &mut substream(s, &["sgd", "held_out"], &[replicate]),
    );
    let mut stream = spec.stream(substream(s, &["sgd", "stream"], &[replicate]));
    let mut params = init_network(
        config.m,
        config.d,
        &mut substream(s, &["sgd", "init"], &[replicate]),
    )?;
    let init = params.snapshot();
    let constants = linear_constants(config, config.n.max(1))?;
    let mut opts = SgdOptions::new(config.eta, config.n);
    opts.move_bound = constants.move_bound(config.m);
    opts.held_out = Some(&test);
    opts.eval_stride = config.eval_stride;
    let (trace, slacks) = if monitored {
        let u_bar = build_u_bar(&init, &SeparatorFn::linear(u)?)?.into_matrix();
        let mut anchored =
            SquaredDistMonitor::new(anchor(init.weights(), &u_bar, constants.lambda));
        let mut origin = SquaredDistMonitor::new(init.weights().clone());
        let trace = {
            let mut monitors: [&mut dyn StepMonitor; 2] = [&mut anchored, &mut origin];
            sgd_train(&mut params, &init, &mut stream, &opts, &mut monitors)?
        };
        (trace, Some((anchored.min_slack(), origin.min_slack())))
    } else {
        (
            sgd_train(&mut params, &init, &mut stream, &opts, &mut [])?,
            None,
        )
    };
    Ok(SgdRun {
        running_error: trace.running_test_error(),
        final_error: trace.held_out.last().map_or(f64::NAN, |p| p.error),
        lhs: trace.test_q_sum(),
        rhs: 4.0 * trace.stream_q_sum() + 4.0 * (1.0 / config.delta).ln(),
        slacks,
        records: trace.records,
    })
}

/// Online SGD: running held-out error, the martingale inequality across
/// replicates, and the squared-distance inequality on the main run.
pub fn exp_sgd(config: &ExperimentConfig) -> Result<RunArtifacts> {
    need_linear(config)?;
    if config.n == 0 || config.held_out == 0 {
        return Err(NtkError::Config(
            "sgd needs n >= 1 and held_out >= 1".into(),
        ));
    }
    let main = sgd_replicate(config, 0, true)?;
    let (anchored, origin) = main.slacks.expect("monitored run");
    let mut checks = vec![
        Check::at_most("running_test_error", main.running_error, config.eps),
        Check::at_least("squared_dist_slack[anchor_lambda_u]", anchored, -SLACK_TOL),
        Check::at_least("squared_dist_slack[anchor_init]", origin, -SLACK_TOL),
    ];
    let mut lemmas = vec![
        lemma(
            "squared_dist_sgd",
            json!({"anchor": "anchor_lambda_u"}),
            -SLACK_TOL,
            anchored,
            anchored >= -SLACK_TOL,
        ),
        lemma(
            "squared_dist_sgd",
            json!({"anchor": "anchor_init"}),
            -SLACK_TOL,
            origin,
            origin >= -SLACK_TOL,
        ),
        lemma(
            "gen_sgd",
            json!({"replicate": 0}),
            main.rhs,
            main.lhs,
            main.lhs <= main.rhs,
        ),
    ];
    let extra_reps: Vec<Result<SgdRun>> = (1..config.replicates.max(1) as u64)
        .into_par_iter()
        .map(|r| sgd_replicate(config, r, false))
        .collect();
    let mut holds = vec![main.lhs <= main.rhs];
    let mut rep_rows = vec![vec![
        CsvCell::from(0usize),
        main.lhs.into(),
        main.rhs.into(),
        main.running_error.into(),
    ]];
    for (i, rep) in extra_reps.into_iter().enumerate() {
        let rep = rep?;
        holds.push(rep.lhs <= rep.rhs);
        rep_rows.push(vec![
            (i + 1).into(),
            rep.lhs.into(),
            rep.rhs.into(),
            rep.running_error.into(),
        ]);
    }
    let frequency = holds.iter().filter(|h| **h).count() as f64 / holds.len() as f64;
    if holds.len() > 1 {
        checks.push(Check::at_least(
            "gen_sgd_frequency",
            frequency,
            1.0 - config.delta,
        ));
        lemmas.push(lemma(
            "gen_sgd",
            json!({"replicates": holds.len(), "delta": config.delta}),
            1.0 - config.delta,
            frequency,
            frequency >= 1.0 - config.delta,
        ));
    } else {
        checks.push(Check::at_most("gen_sgd_inequality", main.lhs, main.rhs));
    }
    let observed = json!({
        "running_test_error": main.running_error,
        "final_test_error": main.final_error,
        "gen_sgd_lhs": main.lhs,
        "gen_sgd_rhs": main.rhs,
        "gen_sgd_frequency": frequency,
        "min_slack_anchor_lambda_u": anchored,
        "min_slack_anchor_init": origin,
    });
    let parameters = json!({
        "stream": config.n,
        "held_out": config.held_out,
        "m": config.m,
        "gamma": config.gamma0 / 2.0,
        "replicates": holds.len(),
    });
    let mut out = artifacts(
        config,
        summary(config, "sgd_online", parameters, observed, checks),
    );
    out.lemma_checks = lemmas;
    out.train_trace = Some(render_trace(&main.records));
    out.extra.push((
        "replicates.csv".into(),
        render_csv(
            &["replicate", "test_q_sum", "bound", "running_test_error"],
            &rep_rows,
        ),
    ));
    Ok(out)
}

/// Parses `k0`, `k1`, `k2` or `k1+k2`.
pub fn parse_kernel(tag: &str) -> Result<KernelFn> {
    match tag {
        "k0" => Ok(KernelFn::Linear),
        "k1" => Ok(KernelFn::K1),
        "k2" => Ok(KernelFn::K2),
        "k1+k2" => Ok(KernelFn::ntk_both_layers()),
        other => Err(NtkError::Config(format!("unknown kernel `{other}`"))),
    }
}

/// Kernel margin, witness checks and the eigenvalue bound on one dataset.
pub fn exp_margin(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let kernel = parse_kernel(&config.kernel)?;
    let data = finite_dataset(config)?;
    let g = gram(&kernel, &data)?;
    let result = solve_margin(&g, data.labels(), DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    let eigen_lb = eigen_margin_lower_bound(&g);
    let mut checks = vec![
        Check::at_most("duality_gap", result.duality_gap, DEFAULT_TOL),
        Check::at_most(
            "eigen_lower_bound_minus_gamma",
            eigen_lb - result.gamma,
            1e-9,
        ),
    ];
    let mut observed = json!({
        "gamma": result.gamma,
        "duality_gap": result.duality_gap,
        "iterations": result.iterations,
        "converged": result.converged,
        "support_size": result.support_size,
        "eigen_lower_bound": eigen_lb,
        "min_eigenvalue": g.min_eigenvalue(),
    });
    if result.gamma > DEFAULT_TOL {
        let wm = witness_margins(&result, &g, data.labels())?;
        let min_wm = wm.iter().copied().fold(f64::INFINITY, f64::min);
        checks.push(Check::at_least(
            "witness_min_margin",
            min_wm,
            result.gamma - 1e-3,
        ));
        observed["witness_min_margin"] = json!(min_wm);
        if kernel == KernelFn::K1 && config.mc_samples > 0 {
            let mut r = substream(config.seed, &["margin", "supnorm"], &[]);
            let sup = witness_supnorm_check(&result, &data, config.mc_samples, &mut r)?;
            checks.push(Check::at_most("witness_supnorm", sup, 1.0 + 1e-9));
            observed["witness_supnorm"] = json!(sup);
        }
    }
    let parameters = json!({
        "kernel": g.source(),
        "n": data.len(),
        "d": data.dim(),
        "fingerprint": g.fingerprint(),
    });
    let mut out = artifacts(
        config,
        summary(config, "kernel_margin", parameters, observed, checks),
    );
    let mut gram_csv = Vec::new();
    g.write_csv(&mut gram_csv)?;
    out.extra.push((
        "gram.csv".into(),
        String::from_utf8(gram_csv).expect("ascii"),
    ));
    out.extra.push((
        "margin.json".into(),
        serde_json::to_string_pretty(&result)? + "\n",
    ));
    Ok(out)
}

/// Allowed analytic-vs-sampled disagreements per kernel.
pub const KERNEL_MC_MAX_FAILURES: usize = 2;

/// Closed-form `K1`, `K2` against Monte Carlo on random unit pairs, plus
/// the exact special values.
pub fn exp_kernel(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let d = config.d;
    if d < 2 {
        return Err(NtkError::Config("kernel checks need d >= 2".into()));
    }
    let n_mc = config.mc_samples.max(1);
    let rows: Vec<Result<[f64; 6]>> = (0..config.trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = substream(config.seed, &["kernel", "pair"], &[i]);
            let x = uniform_sphere(d, &mut r);
            let y = uniform_sphere(d, &mut r);
            let e1 = k1_mc(
                &x,
                &y,
                n_mc,
                &mut substream(config.seed, &["kernel", "k1"], &[i]),
            )?;
            let e2 = k2_mc(
                &x,
                &y,
                n_mc,
                &mut substream(config.seed, &["kernel", "k2"], &[i]),
            )?;
            Ok([
                k1(&x, &y)?,
                e1.mean,
                e1.stderr,
                k2(&x, &y)?,
                e2.mean,
                e2.stderr,
            ])
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let outside = |a: f64, m: f64, se: f64| (a - m).abs() > 4.0 * se;
    let fail1 = rows.iter().filter(|r| outside(r[0], r[1], r[2])).count();
    let fail2 = rows.iter().filter(|r| outside(r[3], r[4], r[5])).count();

    let mut r = substream(config.seed, &["kernel", "special"], &[]);
    let x = uniform_sphere(d, &mut r);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let mut perp = uniform_sphere(d, &mut r);
    let proj = dot(&perp, &x);
    perp.iter_mut().zip(&x).for_each(|(p, xi)| *p -= proj * xi);
    let norm = l2_norm(&perp);
    perp.iter_mut().for_each(|p| *p /= norm);
    let specials = [
        ("k1_self", k1(&x, &x)?, 0.5),
        ("k1_antipodal", k1(&x, &neg)?, 0.0),
        ("k1_orthogonal", k1(&x, &perp)?, 0.0),
        ("k2_self", k2(&x, &x)?, 0.5),
        (
            "k2_orthogonal",
            k2(&x, &perp)?,
            1.0 / (2.0 * std::f64::consts::PI),
        ),
    ];
    let pts = Dataset::new(
        (0..10)
            .map(|_| LabeledExample::new(uniform_sphere(d, &mut r), 1.0))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let k1_gram = gram(&KernelFn::K1, &pts)?;
    let k2_gram = gram(&KernelFn::K2, &pts)?;

    let mut checks = vec![
        Check::at_most(
            "k1_mc_failures",
            fail1 as f64,
            KERNEL_MC_MAX_FAILURES as f64,
        ),
        Check::at_most(
            "k2_mc_failures",
            fail2 as f64,
            KERNEL_MC_MAX_FAILURES as f64,
        ),
        Check::at_least("k1_gram_min_eigenvalue", k1_gram.min_eigenvalue(), -1e-10),
        Check::at_least("k2_gram_min_eigenvalue", k2_gram.min_eigenvalue(), -1e-10),
    ];
    for (name, value, expected) in specials {
        checks.push(Check::at_most(
            format!("{name}_error"),
            (value - expected).abs(),
            1e-12,
        ));
    }
    let csv_rows: Vec<Vec<CsvCell>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![CsvCell::from(i)];
            row.extend(r.iter().map(|v| CsvCell::from(*v)));
            row
        })
        .collect();
    let parameters = json!({"d": d, "pairs": config.trials, "mc_samples": n_mc});
    let observed = json!({"k1_failures": fail1, "k2_failures": fail2});
    let mut out = artifacts(
        config,
        summary(config, "kernel_closed_forms", parameters, observed, checks),
    );
    out.extra.push((
        "kernel_pairs.csv".into(),
        render_csv(
            &["pair", "k1", "k1_mc", "k1_se", "k2", "k2_mc", "k2_se"],
            &csv_rows,
        ),
    ));
    Ok(out)
}

/// The 2-XOR population-margin threshold `1/(60d)`.
pub fn xor_margin_threshold(d: usize) -> f64 {
    1.0 / (60.0 * d as f64)
}

/// Pass when the lower `3σ` end clears the threshold; inconclusive when the
/// interval is wider than the threshold itself.
pub fn ci_status(mean: f64, stderr: f64, threshold: f64) -> Status {
    if 3.0 * stderr >= threshold {
        Status::Inconclusive
    } else {
        Status::from_bool(mean >= threshold - 3.0 * stderr)
    }
}

/// Noise patterns to test: all of them when there are at most `requested`.
fn chosen_patterns(config: &ExperimentConfig) -> Vec<u64> {
    let d = config.d;
    let total = 1u64.checked_shl((d - 2) as u32).unwrap_or(u64::MAX);
    if total <= config.noise_patterns as u64 {
        return (0..total).collect();
    }
    let mut r = substream(config.seed, &["xor_margin", "patterns"], &[]);
    let mut idx: Vec<u64> = index::sample(&mut r, total as usize, config.noise_patterns)
        .into_iter()
        .map(|i| i as u64)
        .collect();
    idx.sort_unstable();
    idx
}

/// Monte Carlo population margin of the 2-XOR separator on every prototype
/// crossed with sampled noise patterns.
pub fn exp_xor_margin(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let d = config.d;
    let sep = SeparatorFn::xor2(d)?;
    let threshold = xor_margin_threshold(d);
    let patterns = chosen_patterns(config);
    let jobs: Vec<(usize, u64)> = (0..XOR2_PROTOTYPES.len())
        .flat_map(|p| patterns.iter().map(move |&k| (p, k)))
        .collect();
    let estimates: Vec<Result<(usize, u64, f64, f64)>> = jobs
        .par_iter()
        .map(|&(p, k)| {
            let ex = xor2_point(d, p, &noise_pattern(d, k));
            let mut r = substream(config.seed, &["xor_margin", "mc"], &[p as u64, k]);
            let e = population_margin_mc(&sep, &ex, config.mc_samples, &mut r)?;
            Ok((p, k, e.mean, e.stderr))
        })
        .collect();
    let estimates = estimates.into_iter().collect::<Result<Vec<_>>>()?;
    let statuses: Vec<Status> = estimates
        .iter()
        .map(|(_, _, m, se)| ci_status(*m, *se, threshold))
        .collect();
    let status = Status::combine(statuses.iter().copied());
    let (worst_idx, worst) = estimates
        .iter()
        .enumerate()
        .map(|(i, (_, _, m, se))| (i, m + 3.0 * se - threshold))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let min_lower = estimates
        .iter()
        .map(|(_, _, m, se)| m + 3.0 * se)
        .fold(f64::INFINITY, f64::min);
    let check = Check::at_least("min_estimate_plus_3se", min_lower, threshold).with_status(status);
    let observed = json!({
        "estimates": estimates.len(),
        "min_estimate": estimates.iter().map(|e| e.2).fold(f64::INFINITY, f64::min),
        "max_stderr": estimates.iter().map(|e| e.3).fold(0.0, f64::max),
        "worst_index": worst_idx,
        "worst_excess": worst,
        "counts": {
            "pass": statuses.iter().filter(|s| **s == Status::Pass).count(),
            "fail": statuses.iter().filter(|s| **s == Status::Fail).count(),
            "inconclusive": statuses.iter().filter(|s| **s == Status::Inconclusive).count(),
        },
    });
    let parameters = json!({
        "d": d,
        "patterns": patterns,
        "mc_samples": config.mc_samples,
        "threshold": threshold,
    });
    let rows: Vec<Vec<CsvCell>> = estimates
        .iter()
        .zip(&statuses)
        .map(|((p, k, m, se), s)| {
            vec![
                (*p).into(),
                (*k).into(),
                (*m).into(),
                (*se).into(),
                threshold.into(),
                serde_json::to_value(s)
                    .expect("status")
                    .as_str()
                    .expect("str")
                    .into(),
            ]
        })
        .collect();
    let mut out = artifacts(
        config,
        summary(
            config,
            "xor_population_margin",
            parameters,
            observed,
            vec![check],
        ),
    );
    out.extra.push((
        "xor_margins.csv".into(),
        render_csv(
            &[
                "prototype",
                "pattern",
                "estimate",
                "stderr",
                "threshold",
                "status",
            ],
            &rows,
        ),
    ));
    Ok(out)
}

/// Frequency of the degenerate activation pattern on 2-XOR quadruples.
pub fn exp_ntk_lb(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let report = ntk_lb_simulation(config.d, config.m, config.trials, config.seed)?;
    let floor = frequency_floor(0.5, config.trials, 3.0);
    let checks = vec![
        Check::at_least("degenerate_frequency", report.frequency, floor),
        Check::at_most("max_degenerate_gamma", report.max_degenerate_gamma, 1e-6),
    ];
    let parameters = json!({"d": config.d, "m": config.m, "trials": config.trials});
    let observed = serde_json::to_value(&report)?;
    Ok(artifacts(
        config,
        summary(
            config,
            "ntk_width_lower_bound",
            parameters,
            observed,
            checks,
        ),
    ))
}

/// Lowest success frequency the random-label check accepts.
pub const RANDOM_LABEL_FLOOR: f64 = 0.85;

/// `γ1` under uniformly random labels on a fixed point set.
pub fn exp_random_label(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let data = finite_dataset(config)?;
    let report = random_label_experiment(&data, config.trials, config.seed)?;
    let below = report
        .gammas
        .iter()
        .filter(|g| **g <= report.threshold)
        .count();
    let fraction_all = below as f64 / report.trials as f64;
    let checks = vec![Check::at_least(
        "fraction_below_threshold",
        fraction_all,
        RANDOM_LABEL_FLOOR,
    )];
    let parameters = json!({"n": data.len(), "d": data.dim(), "trials": config.trials});
    let observed = json!({
        "threshold": report.threshold,
        "fraction_below": fraction_all,
        "fraction_below_converged": report.fraction_below,
        "non_converged": report.non_converged,
        "quantiles": report.quantiles,
    });
    let rows: Vec<Vec<CsvCell>> = report
        .gammas
        .iter()
        .enumerate()
        .map(|(i, g)| vec![i.into(), (*g).into()])
        .collect();
    let mut out = artifacts(
        config,
        summary(config, "random_label_margin", parameters, observed, checks),
    );
    out.extra
        .push(("gammas.csv".into(), render_csv(&["trial", "gamma"], &rows)));
    Ok(out)
}

/// Largest fitted log-log slope the sample-complexity check accepts.
pub const COMPLEXITY_SLOPE_CEILING: f64 = 2.5;

/// Samples kernel SGD on `K1 + K2` needs to reach `target_error` on 2-XOR,
/// per dimension, and the fitted log-log slope.
pub fn exp_kernel_complexity(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let dims = if config.dims.is_empty() {
        vec![config.d]
    } else {
        config.dims.clone()
    };
    if dims.iter().any(|d| *d < 3) {
        return Err(NtkError::Config("2-XOR needs d >= 3".into()));
    }
    let replicates = config.replicates.max(1) as u64;
    let mut held = Vec::new();
    for &d in &dims {
        let mode = if config.exhaustive {
            SamplingMode::Exhaustive
        } else {
            SamplingMode::Iid(config.held_out)
        };
        held.push(make_xor2(
            d,
            mode,
            &mut substream(config.seed, &["kernel_complexity", "held_out"], &[d as u64]),
        )?);
    }
    let jobs: Vec<(usize, u64)> = (0..dims.len())
        .flat_map(|i| (0..replicates).map(move |r| (i, r)))
        .collect();
    let runs: Vec<Result<Option<usize>>> = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let d = dims[i];
            let spec = DistributionSpec::xor2(d)?;
            let mut stream = spec.stream(substream(
                config.seed,
                &["kernel_complexity", "stream"],
                &[d as u64, rep],
            ));
            let cfg = KernelSgdConfig {
                eta: config.eta,
                n_steps: config.max_steps,
                stop_below: Some(config.target_error),
            };
            let h = HeldOut {
                data: &held[i],
                stride: config.eval_stride,
            };
            let run = kernel_sgd(KernelFn::ntk_both_layers(), &mut stream, d, &cfg, Some(&h))?;
            Ok(run.steps_to_error(config.target_error))
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut medians = Vec::new();
    let mut rows = Vec::new();
    let mut run_rows = Vec::new();
    for (i, &d) in dims.iter().enumerate() {
        let per: Vec<Option<usize>> =
            runs[i * replicates as usize..(i + 1) * replicates as usize].to_vec();
        for (rep, s) in per.iter().enumerate() {
            run_rows.push(vec![
                d.into(),
                rep.into(),
                s.map_or(CsvCell::Text("NA".into()), CsvCell::from),
            ]);
        }
        // a replicate that never reached the target counts as infinitely slow
        let vals: Vec<f64> = per
            .iter()
            .map(|s| s.map_or(f64::INFINITY, |v| v as f64))
            .collect();
        let med = median(&vals);
        rows.push(vec![d.into(), CsvCell::from(med)]);
        medians.push(med);
    }
    let xs: Vec<f64> = dims.iter().map(|d| (*d as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|v| v.ln()).collect();
    let slope = if dims.len() >= 2 && medians.iter().all(|v| v.is_finite()) {
        ls_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    let checks = if dims.len() >= 2 {
        vec![Check::at_most(
            "log_log_slope",
            slope,
            COMPLEXITY_SLOPE_CEILING,
        )]
    } else {
        Vec::new()
    };
    let parameters = json!({
        "dims": dims,
        "replicates": replicates,
        "eta": config.eta,
        "target_error": config.target_error,
        "max_steps": config.max_steps,
        "eval_stride": config.eval_stride,
        "held_out": if config.exhaustive { json!("exhaustive") } else { json!(config.held_out) },
    });
    let observed = json!({"median_samples": medians, "slope": slope});
    let mut out = artifacts(
        config,
        summary(
            config,
            "kernel_sgd_sample_complexity",
            parameters,
            observed,
            checks,
        ),
    );
    out.extra.push((
        "complexity.csv".into(),
        render_csv(&["d", "samples"], &rows),
    ));
    out.extra.push((
        "complexity_runs.csv".into(),
        render_csv(&["d", "replicate", "samples"], &run_rows),
    ));
    Ok(out)
}

/// Per-seed outcome of the three initialization lemmas.
struct InitOutcome {
    ntk_to_ek: bool,
    stable_act: bool,
    init_size: bool,
    min_margin: f64,
    max_alpha: f64,
    max_output: f64,
}

/// Seed-level violation frequencies of the initialization lemmas on the
/// 2-XOR support.
pub fn exp_init_lemmas(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let d = config.d;
    let data = finite_dataset(config)?;
    let n = data.len() as f64;
    let delta = config.delta;
    let sep = SeparatorFn::xor2(d)?;
    // the margin is invariant under flips of the noise coordinates, so one
    // pattern per prototype covers the support
    let mut gamma_hat = f64::INFINITY;
    let mut prototype_margins = Vec::new();
    for p in 0..XOR2_PROTOTYPES.len() {
        let ex = xor2_point(d, p, &noise_pattern(d, 0));
        let e = population_margin_mc(
            &sep,
            &ex,
            config.mc_samples,
            &mut substream(config.seed, &["init_lemmas", "gamma"], &[p as u64]),
        )?;
        gamma_hat = gamma_hat.min(e.mean - 3.0 * e.stderr);
        prototype_margins.push(e);
    }
    let alpha_bound = |m: usize| {
        (2.0 / std::f64::consts::PI).sqrt() * config.eps2
            + ((n / delta).ln() / (2.0 * m as f64)).sqrt()
    };
    let margin_bound = |m: usize| gamma_hat - (2.0 * (n / delta).ln() / m as f64).sqrt();

    let mut checks = Vec::new();
    let mut lemmas = Vec::new();
    let mut rows = Vec::new();
    for m in config.width_list() {
        let outcomes: Vec<Result<InitOutcome>> = (0..config.trials as u64)
            .into_par_iter()
            .map(|s| {
                let params = init_network(
                    m,
                    d,
                    &mut substream(config.seed, &["init_lemmas", "init"], &[m as u64, s]),
                )?;
                let init = params.snapshot();
                let u_bar = build_u_bar(&init, &sep)?;
                let fm = finite_margin(&params, u_bar.matrix(), &data)?;
                let preact = preactivations(params.weights(), &data);
                let alphas = near_activation_fractions(&preact, config.eps2);
                let max_alpha = alphas.iter().copied().fold(0.0, f64::max);
                let out = init_output_check(&params, &data, delta)?;
                let max_output = out.abs_outputs.iter().copied().fold(0.0, f64::max);
                Ok(InitOutcome {
                    ntk_to_ek: fm.min < margin_bound(m),
                    stable_act: max_alpha > alpha_bound(m),
                    init_size: out.violations > 0,
                    min_margin: fm.min,
                    max_alpha,
                    max_output,
                })
            })
            .collect();
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        let seeds = outcomes.len() as f64;
        let freq =
            |f: fn(&InitOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / seeds;
        let results = [
            ("ntk_to_ek", freq(|o| o.ntk_to_ek), margin_bound(m)),
            ("stable_act", freq(|o| o.stable_act), alpha_bound(m)),
            (
                "init_size",
                freq(|o| o.init_size),
                init_output_threshold(data.len(), delta),
            ),
        ];
        for (name, f, bound) in results {
            checks.push(Check::at_most(
                format!("{name}_violation_frequency[m={m}]"),
                f,
                delta,
            ));
            lemmas.push(lemma(
                name,
                json!({"m": m, "seeds": outcomes.len(), "n": data.len(), "delta": delta, "bound": bound}),
                delta,
                f,
                f <= delta,
            ));
        }
        for (s, o) in outcomes.iter().enumerate() {
            rows.push(vec![
                m.into(),
                s.into(),
                o.min_margin.into(),
                o.max_alpha.into(),
                o.max_output.into(),
            ]);
        }
    }
    let parameters = json!({
        "d": d,
        "n": data.len(),
        "delta": delta,
        "eps2": config.eps2,
        "seeds": config.trials,
        "widths": config.width_list(),
        "mc_samples": config.mc_samples,
    });
    let observed = json!({"gamma_hat": gamma_hat, "prototype_margins": prototype_margins});
    let mut out = artifacts(
        config,
        summary(
            config,
            "initialization_lemmas",
            parameters,
            observed,
            checks,
        ),
    );
    out.lemma_checks = lemmas;
    out.extra.push((
        "init_seeds.csv".into(),
        render_csv(
            &["m", "seed", "min_margin_u", "max_alpha", "max_abs_output"],
            &rows,
        ),
    ));
    Ok(out)
}
