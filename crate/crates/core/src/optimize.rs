//! Gradient descent and online SGD on the first layer, with per-step records.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, NtkError, Result};
use crate::model::{
    linearized_from_parts, logistic_loss, logistic_loss_slope, masked_combination, preactivations,
    BatchEval, Dataset, InitSnapshot, LabeledExample, NetworkParams,
};
use crate::separators::finite_margin_from_parts;

/// Slack below this counts as a violated squared-distance inequality.
pub const SLACK_TOL: f64 = 1e-8;

/// Width, step count and radius for a target risk `eps` at confidence `delta`
/// on `n` examples with separation margin `gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    /// `λ = 4 (√(2 ln(4n/δ)) + ln(4/ε)) / γ`.
    pub lambda: f64,
    /// `M = 4096 λ² / γ⁶`.
    pub big_m: f64,
    /// `T = ⌈2λ² / (η ε)⌉`.
    pub t_steps: u64,
    pub gamma: f64,
    pub eps: f64,
    pub delta: f64,
    pub n: usize,
    pub eta: f64,
}

impl TheoremConstants {
    pub fn new(n: usize, delta: f64, eps: f64, gamma: f64, eta: f64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", "need at least one example"));
        }
        if !(delta > 0.0 && delta < 1.0 / 3.0) {
            return Err(invalid("delta", "must lie in (0, 1/3)"));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(invalid("eps", "must lie in (0, 1)"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid("gamma", "must be positive"));
        }
        check_eta(eta)?;
        let lambda =
            4.0 * ((2.0 * (4.0 * n as f64 / delta).ln()).sqrt() + (4.0 / eps).ln()) / gamma;
        let big_m = 4096.0 * lambda * lambda / gamma.powi(6);
        let t_steps = (2.0 * lambda * lambda / (eta * eps)).ceil() as u64;
        Ok(Self {
            lambda,
            big_m,
            t_steps,
            gamma,
            eps,
            delta,
            n,
            eta,
        })
    }

    /// `4λ / (γ √m)`.
    pub fn move_bound(&self, m: usize) -> f64 {
        4.0 * self.lambda / (self.gamma * (m as f64).sqrt())
    }

    pub fn width_sufficient(&self, m: usize) -> bool {
        m as f64 >= self.big_m
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(invalid("eta", "step size must lie in (0, 1]"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `R̂(W(t))` for GD; the loss on the fresh example for SGD.
    pub risk: f64,
    /// `Q̂(W(t))` for GD; `-ℓ'` on the fresh example for SGD.
    pub qhat: f64,
    /// `max_s ‖w_s(t) - w_s(0)‖₂`.
    pub max_row_move: f64,
    pub move_bound: f64,
    /// `min_i y_i ⟨∇f_i(W(t)), Ū⟩`, NaN when no `Ū` was supplied.
    pub min_margin_u: f64,
    /// `Σ_{τ<t} qhat(τ)`.
    pub cum_qhat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    /// First step attaining the smallest `risk`.
    pub k_min_risk: usize,
    /// `(step, W(step))` at step 0, the selected step, the last step, and
    /// any configured stride.
    pub snapshots: Vec<(usize, Array2<f64>)>,
}

impl TrainTrace {
    /// `(1/T) Σ_{t<T} risk(t)`.
    pub fn average_risk(&self, t: usize) -> f64 {
        let t = t.min(self.records.len()).max(1);
        self.records[..t].iter().map(|r| r.risk).sum::<f64>() / t as f64
    }

    /// Smallest `T` with `(1/T) Σ_{t<T} risk(t) ≤ target`.
    pub fn first_average_below(&self, target: f64) -> Option<usize> {
        let mut sum = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            sum += r.risk;
            if sum / (i + 1) as f64 <= target {
                return Some(i + 1);
            }
        }
        None
    }

    /// Steps where `max_row_move > move_bound`.
    pub fn move_bound_violations(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.max_row_move > r.move_bound)
            .map(|r| r.step)
            .collect()
    }

    /// Largest `max_row_move - (η/√m) cum_qhat` over the trace.
    pub fn movement_chain_excess(&self, eta: f64, m: usize) -> f64 {
        let scale = eta / (m as f64).sqrt();
        self.records
            .iter()
            .map(|r| r.max_row_move - scale * r.cum_qhat)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn snapshot(&self, step: usize) -> Option<&Array2<f64>> {
        self.snapshots
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, w)| w)
    }
}

pub fn select_min_risk(records: &[StepRecord]) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.risk < records[best].risk {
            best = i;
        }
    }
    records.get(best).map_or(0, |r| r.step)
}

/// What a monitor sees before the update at `step`.
pub struct StepView<'a> {
    pub step: usize,
    pub weights: &'a Array2<f64>,
    pub signs: &'a [f64],
    /// The full data set for GD, the fresh example for SGD.
    pub batch: &'a Dataset,
    /// `batch · Wᵀ`.
    pub preact: &'a Array2<f64>,
    /// Mean loss on `batch` at `weights`.
    pub risk: f64,
    pub eta: f64,
    /// True when `batch` is the same data set at every step.
    pub fixed_batch: bool,
}

pub trait StepMonitor {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()>;
}

/// Tracks the slack
/// `‖W(0) - W̄‖² + 2η Σ_{τ<t} R^{(τ)}(W̄) - η Σ_{τ<t} R(W(τ)) - ‖W(t) - W̄‖²`
/// of the squared-distance inequality, where `R^{(τ)}` is the loss of the
/// model linearized at `W(τ)` on that step's batch.
#[derive(Clone, Debug)]
pub struct SquaredDistMonitor {
    w_bar: Array2<f64>,
    initial_dist: Option<f64>,
    cum_lin: f64,
    cum_risk: f64,
    proj_cache: Option<Array2<f64>>,
    pub slacks: Vec<f64>,
}

impl SquaredDistMonitor {
    pub fn new(w_bar: Array2<f64>) -> Self {
        Self {
            w_bar,
            initial_dist: None,
            cum_lin: 0.0,
            cum_risk: 0.0,
            proj_cache: None,
            slacks: Vec::new(),
        }
    }

    pub fn min_slack(&self) -> f64 {
        self.slacks.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn violations(&self) -> usize {
        self.slacks.iter().filter(|s| **s < -SLACK_TOL).count()
    }
}

fn sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl StepMonitor for SquaredDistMonitor {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        check_dim(self.w_bar.nrows(), view.weights.nrows())?;
        check_dim(self.w_bar.ncols(), view.weights.ncols())?;
        let dist = sq_dist(view.weights, &self.w_bar);
        let initial = *self.initial_dist.get_or_insert(dist);
        self.slacks
            .push(initial + 2.0 * view.eta * self.cum_lin - view.eta * self.cum_risk - dist);

        let fresh;
        let proj = if view.fixed_batch {
            self.proj_cache
                .get_or_insert_with(|| preactivations(&self.w_bar, view.batch))
        } else {
            fresh = preactivations(&self.w_bar, view.batch);
            &fresh
        };
        let lin = linearized_from_parts(view.preact, proj, view.signs);
        let n = view.batch.len() as f64;
        let lin_risk: f64 = lin
            .iter()
            .zip(view.batch.labels())
            .map(|(f, y)| logistic_loss(y * f))
            .sum::<f64>()
            / n;
        self.cum_lin += lin_risk;
        self.cum_risk += view.risk;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GdOptions {
    pub eta: f64,
    pub t_max: usize,
    /// Value written to the `move_bound` column.
    pub move_bound: f64,
    /// Tracked for `min_margin_u` when present.
    pub u_bar: Option<Array2<f64>>,
    /// Additional snapshot every `stride` steps.
    pub snapshot_stride: Option<usize>,
    /// Stop once `(1/T) Σ_{t<T} R̂(W(t))` is at most this value.
    pub stop_average_below: Option<f64>,
}

impl GdOptions {
    pub fn new(eta: f64, t_max: usize) -> Self {
        Self {
            eta,
            t_max,
            move_bound: f64::INFINITY,
            u_bar: None,
            snapshot_stride: None,
            stop_average_below: None,
        }
    }
}

fn max_row_move(w: &Array2<f64>, w0: &Array2<f64>) -> f64 {
    w.axis_iter(Axis(0))
        .zip(w0.axis_iter(Axis(0)))
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

fn check_finite(w: &Array2<f64>, step: usize) -> Result<()> {
    if w.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NtkError::NonFinite { step })
    }
}

struct SnapshotKeeper {
    stride: Option<usize>,
    kept: Vec<(usize, Array2<f64>)>,
    best: Option<(usize, f64, Array2<f64>)>,
}

impl SnapshotKeeper {
    fn new(stride: Option<usize>) -> Self {
        Self {
            stride,
            kept: Vec::new(),
            best: None,
        }
    }

    fn offer(&mut self, step: usize, risk: f64, w: &Array2<f64>, last: bool) {
        let strided = self.stride.is_some_and(|s| s > 0 && step.is_multiple_of(s));
        if step == 0 || last || strided {
            self.kept.push((step, w.clone()));
        }
        if self.best.as_ref().is_none_or(|(_, r, _)| risk < *r) {
            self.best = Some((step, risk, w.clone()));
        }
    }

    fn finish(mut self) -> Vec<(usize, Array2<f64>)> {
        if let Some((k, _, w)) = self.best {
            if !self.kept.iter().any(|(s, _)| *s == k) {
                self.kept.push((k, w));
            }
        }
        self.kept.sort_by_key(|(s, _)| *s);
        self.kept
    }
}

/// Full-batch gradient descent `W(t+1) = W(t) - η ∇R̂(W(t))` for `t_max`
/// steps. Records steps `0..=t_max`; `params` ends at `W(t_max)`.
pub fn gd_train(
    params: &mut NetworkParams,
    init: &InitSnapshot,
    data: &Dataset,
    opts: &GdOptions,
    monitors: &mut [&mut dyn StepMonitor],
) -> Result<TrainTrace> {
    check_eta(opts.eta)?;
    if opts.t_max == 0 {
        return Err(invalid("t_max", "need at least one step"));
    }
    data.non_empty()?;
    check_dim(params.dim(), data.dim())?;
    check_dim(init.width(), params.width())?;
    let u_proj = match &opts.u_bar {
        Some(u) => {
            check_dim(params.width(), u.nrows())?;
            check_dim(params.dim(), u.ncols())?;
            Some(preactivations(u, data))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(opts.t_max + 1);
    let mut keeper = SnapshotKeeper::new(opts.snapshot_stride);
    let mut cum_qhat = 0.0;
    let mut cum_risk = 0.0;
    for t in 0..=opts.t_max {
        let eval = BatchEval::new(params, data)?;
        if !eval.risk.is_finite() {
            return Err(NtkError::NonFinite { step: t });
        }
        let min_margin_u = match &u_proj {
            Some(p) => {
                finite_margin_from_parts(&eval.preact, p, params.signs(), data.labels())?.min
            }
            None => f64::NAN,
        };
        records.push(StepRecord {
            step: t,
            risk: eval.risk,
            qhat: eval.qhat,
            max_row_move: max_row_move(params.weights(), init.weights()),
            move_bound: opts.move_bound,
            min_margin_u,
            cum_qhat,
        });
        cum_risk += eval.risk;
        let reached = opts
            .stop_average_below
            .is_some_and(|target| cum_risk / (t + 1) as f64 <= target);
        let last = t == opts.t_max || reached;
        keeper.offer(t, eval.risk, params.weights(), last);
        let view = StepView {
            step: t,
            weights: params.weights(),
            signs: params.signs(),
            batch: data,
            preact: &eval.preact,
            risk: eval.risk,
            eta: opts.eta,
            fixed_batch: true,
        };
        for m in monitors.iter_mut() {
            m.observe(&view)?;
        }
        if last {
            break;
        }
        cum_qhat += eval.qhat;
        let grad = eval.gradient(params, data);
        params.weights_mut().scaled_add(-opts.eta, &grad);
        check_finite(params.weights(), t + 1)?;
    }
    Ok(TrainTrace {
        k_min_risk: select_min_risk(&records),
        records,
        snapshots: keeper.finish(),
    })
}

/// Replays the squared-distance inequality over stored iterates
/// `W(0), W(1), …` of a constant-step run.
pub fn check_squared_dist(
    iterates: &[Array2<f64>],
    signs: &[f64],
    w_bar: &Array2<f64>,
    data: &Dataset,
    eta: f64,
) -> Result<Vec<f64>> {
    if iterates.is_empty() {
        return Err(NtkError::MissingIterates);
    }
    let mut monitor = SquaredDistMonitor::new(w_bar.clone());
    for (t, w) in iterates.iter().enumerate() {
        let params = NetworkParams::from_parts(w.clone(), signs.to_vec())?;
        let eval = BatchEval::new(&params, data)?;
        monitor.observe(&StepView {
            step: t,
            weights: w,
            signs,
            batch: data,
            preact: &eval.preact,
            risk: eval.risk,
            eta,
            fixed_batch: true,
        })?;
    }
    Ok(monitor.slacks)
}

#[derive(Clone, Debug)]
pub struct SgdOptions<'a> {
    pub eta: f64,
    pub n_steps: usize,
    pub move_bound: f64,
    /// Fixed evaluation sample for `Q̂_test` and the test error.
    pub held_out: Option<&'a Dataset>,
    /// Evaluate the held-out sample every `eval_stride` steps (and at the end).
    pub eval_stride: usize,
}

impl<'a> SgdOptions<'a> {
    pub fn new(eta: f64, n_steps: usize) -> Self {
        Self {
            eta,
            n_steps,
            move_bound: f64::INFINITY,
            held_out: None,
            eval_stride: 1,
        }
    }
}

/// Held-out statistics at `W(step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutPoint {
    pub step: usize,
    /// Mean of `-ℓ'(y f(x))` over the held-out sample.
    pub q_test: f64,
    /// Fraction with `y f(x) ≤ 0`.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdTrace {
    /// One record per consumed example; `risk` and `qhat` are `ℓ` and `-ℓ'` of
    /// `y_i f_i(W(i))`.
    pub records: Vec<StepRecord>,
    pub held_out: Vec<HeldOutPoint>,
}

impl SgdTrace {
    /// `Σ_{t<n} Q_t(W(t))`.
    pub fn stream_q_sum(&self) -> f64 {
        self.records.iter().map(|r| r.qhat).sum()
    }

    /// Mean held-out error over evaluations at steps `< n_steps`.
    pub fn running_test_error(&self) -> f64 {
        let n = self.records.len();
        let pts: Vec<&HeldOutPoint> = self.held_out.iter().filter(|p| p.step < n).collect();
        pts.iter().map(|p| p.error).sum::<f64>() / pts.len().max(1) as f64
    }

    /// `Σ_{t<n} Q̂_test(W(t))`; requires an evaluation at every step.
    pub fn test_q_sum(&self) -> f64 {
        let n = self.records.len();
        self.held_out
            .iter()
            .filter(|p| p.step < n)
            .map(|p| p.q_test)
            .sum()
    }
}

const REFRESH_HELD_OUT: usize = 1000;

/// Online SGD: step `i` draws `(x_i, y_i)` from `oracle` and sets
/// `W(i+1) = W(i) - η ℓ'(y_i f_i(W(i))) y_i ∇f_i(W(i))`.
pub fn sgd_train(
    params: &mut NetworkParams,
    init: &InitSnapshot,
    oracle: &mut dyn Iterator<Item = LabeledExample>,
    opts: &SgdOptions<'_>,
    monitors: &mut [&mut dyn StepMonitor],
) -> Result<SgdTrace> {
    check_eta(opts.eta)?;
    check_dim(init.width(), params.width())?;
    let m = params.width();
    let scale = 1.0 / (m as f64).sqrt();
    let stride = opts.eval_stride.max(1);

    // held-out pre-activations stored unit-major (m × H) with the outputs they
    // produce; both are updated in place after each step and refreshed periodically
    let unit_major = |w: &Array2<f64>, h: &Dataset| w.dot(&h.features().t());
    let outputs_of = |pre_t: &Array2<f64>, a: &[f64]| -> Vec<f64> {
        let mut outputs = vec![0.0; pre_t.ncols()];
        for (row, &a_s) in pre_t.outer_iter().zip(a) {
            let c = a_s * scale;
            for (o, &z) in outputs.iter_mut().zip(row.iter()) {
                *o += c * z.max(0.0);
            }
        }
        outputs
    };
    let mut held = match opts.held_out {
        Some(h) => {
            h.non_empty()?;
            check_dim(params.dim(), h.dim())?;
            let pre = unit_major(params.weights(), h);
            let out = outputs_of(&pre, params.signs());
            Some((h, pre, out))
        }
        None => None,
    };
    let mut held_points = Vec::new();
    let evaluate = |step: usize, h: &Dataset, outputs: &[f64]| -> HeldOutPoint {
        let (mut q, mut wrong) = (0.0, 0usize);
        for (f, y) in outputs.iter().zip(h.labels()) {
            q += -logistic_loss_slope(y * f);
            if y * f <= 0.0 {
                wrong += 1;
            }
        }
        HeldOutPoint {
            step,
            q_test: q / h.len() as f64,
            error: wrong as f64 / h.len() as f64,
        }
    };

    let mut records = Vec::with_capacity(opts.n_steps);
    let mut cum_qhat = 0.0;
    for i in 0..opts.n_steps {
        let ex = oracle.next().ok_or(NtkError::OracleExhausted {
            consumed: i,
            requested: opts.n_steps,
        })?;
        check_dim(params.dim(), ex.dim())?;
        if let Some((h, pre, out)) = held.as_mut() {
            if i % REFRESH_HELD_OUT == 0 && i > 0 {
                *pre = unit_major(params.weights(), h);
                *out = outputs_of(pre, params.signs());
            }
            if i % stride == 0 {
                held_points.push(evaluate(i, h, out));
            }
        }
        let batch = Dataset::new(vec![ex])?;
        let eval = BatchEval::new(params, &batch)?;
        let y = batch.y(0);
        let margin = y * eval.outputs[0];
        let loss = logistic_loss(margin);
        let slope = logistic_loss_slope(margin);
        records.push(StepRecord {
            step: i,
            risk: loss,
            qhat: -slope,
            max_row_move: max_row_move(params.weights(), init.weights()),
            move_bound: opts.move_bound,
            min_margin_u: f64::NAN,
            cum_qhat,
        });
        let view = StepView {
            step: i,
            weights: params.weights(),
            signs: params.signs(),
            batch: &batch,
            preact: &eval.preact,
            risk: loss,
            eta: opts.eta,
            fixed_batch: false,
        };
        for mon in monitors.iter_mut() {
            mon.observe(&view)?;
        }
        cum_qhat += -slope;

        let coef = -opts.eta * slope * y;
        let step = masked_combination(&eval.preact, &[coef], params.signs(), &batch);
        if let Some((h, pre, out)) = held.as_mut() {
            // Δ⟨w_s, x_j⟩ = coef a_s 1[⟨w_s, x_i⟩ > 0] ⟨x_i, x_j⟩ / √m
            let xi = batch.x(0);
            let inner = h.features().dot(&xi);
            let inner = inner.as_slice().expect("contiguous");
            for s in 0..m {
                if eval.preact[[0, s]] > 0.0 {
                    let a_s = params.signs()[s] * scale;
                    let c = coef * a_s;
                    let mut row = pre.row_mut(s);
                    let row = row.as_slice_mut().expect("standard layout");
                    for ((z, o), g) in row.iter_mut().zip(out.iter_mut()).zip(inner) {
                        let old = *z;
                        let new = old + c * g;
                        *o += a_s * (new.max(0.0) - old.max(0.0));
                        *z = new;
                    }
                }
            }
        }
        *params.weights_mut() += &step;
        check_finite(params.weights(), i + 1)?;
    }
    if let Some((h, _, _)) = held.as_ref() {
        let pre = unit_major(params.weights(), h);
        held_points.push(evaluate(opts.n_steps, h, &outputs_of(&pre, params.signs())));
    }
    Ok(SgdTrace {
        records,
        held_out: held_points,
    })
}
