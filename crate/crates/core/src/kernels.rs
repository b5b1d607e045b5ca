//! Kernels of the infinite-width network on the unit sphere.
//!
//! * `K0(x, x') = ⟨x, x'⟩`, the linear kernel.
//! * `K1(x, x') = E_w[⟨x, x'⟩ 1[⟨w,x⟩>0] 1[⟨w,x'⟩>0]]`, the tangent kernel of the
//!   first layer. With `c = ⟨x, x'⟩` it equals `c (π - arccos c) / (2π)`.
//! * `K2(x, x') = E_w[σ(⟨w,x⟩) σ(⟨w,x'⟩)]`, the tangent kernel of the second
//!   layer, equal to `(√(1-c²) + (π - arccos c) c) / (2π)`.
//!
//! Here `w ~ N(0, I_d)`. The closed forms are what the margin solver consumes;
//! the Monte Carlo variants evaluate the defining expectations directly and
//! serve as their oracle.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{check_dim, invalid, NtkError, Result};
use crate::model::{dot, l2_norm, logistic_loss_slope, relu, Dataset, LabeledExample};
use crate::rng::{self, Rng};
use crate::stats::{McEstimate, MeanAccumulator};

const UNIT_TOL: f64 = 1e-9;

/// A kernel evaluator.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelFn {
    Linear,
    K1,
    /// `K1` estimated from `samples` Gaussian draws, one bank shared by all pairs.
    K1Mc {
        samples: usize,
        seed: u64,
    },
    K2,
    K2Mc {
        samples: usize,
        seed: u64,
    },
    Sum(Vec<KernelFn>),
}

impl KernelFn {
    /// The both-layer kernel `K1 + K2`.
    pub fn ntk_both_layers() -> Self {
        Self::Sum(vec![Self::K1, Self::K2])
    }

    pub fn tag(&self) -> String {
        match self {
            Self::Linear => "k0".into(),
            Self::K1 => "k1".into(),
            Self::K2 => "k2".into(),
            Self::K1Mc { samples, seed } => format!("k1_mc[n={samples};seed={seed}]"),
            Self::K2Mc { samples, seed } => format!("k2_mc[n={samples};seed={seed}]"),
            Self::Sum(parts) => {
                let tags: Vec<String> = parts.iter().map(Self::tag).collect();
                format!("sum[{}]", tags.join("+"))
            }
        }
    }

    /// Whether values are exact rather than sampled.
    pub fn is_exact(&self) -> bool {
        match self {
            Self::Linear | Self::K1 | Self::K2 => true,
            Self::K1Mc { .. } | Self::K2Mc { .. } => false,
            Self::Sum(parts) => parts.iter().all(Self::is_exact),
        }
    }

    /// Materializes sample banks for inputs of dimension `d`.
    pub fn prepare(&self, d: usize) -> Result<PreparedKernel> {
        Ok(match self {
            Self::Linear => PreparedKernel::Linear,
            Self::K1 => PreparedKernel::K1,
            Self::K2 => PreparedKernel::K2,
            Self::K1Mc { samples, seed } => PreparedKernel::Mc {
                kind: McKind::FirstLayer,
                bank: SampleBank::new(*samples, d, *seed)?,
            },
            Self::K2Mc { samples, seed } => PreparedKernel::Mc {
                kind: McKind::SecondLayer,
                bank: SampleBank::new(*samples, d, *seed)?,
            },
            Self::Sum(parts) => PreparedKernel::Sum(
                parts
                    .iter()
                    .map(|k| k.prepare(d))
                    .collect::<Result<Vec<_>>>()?,
            ),
        })
    }

    /// One evaluation; prepares banks on every call, so prefer [`KernelFn::prepare`] in loops.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(x.len(), y.len())?;
        check_unit(x)?;
        check_unit(y)?;
        Ok(self.prepare(x.len())?.eval(x, y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McKind {
    FirstLayer,
    SecondLayer,
}

/// `N × d` standard Gaussian draws, fixed by a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBank {
    draws: Array2<f64>,
}

impl SampleBank {
    pub fn new(samples: usize, d: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(invalid("samples", "need at least one Gaussian draw"));
        }
        let mut draws = Array2::zeros((samples, d));
        let mut rng = rng::seeded(seed);
        rng::fill_gaussian(&mut rng, draws.as_slice_mut().expect("standard layout"));
        Ok(Self { draws })
    }

    pub fn draws(&self) -> &Array2<f64> {
        &self.draws
    }

    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    fn project(&self, x: &[f64]) -> Array1<f64> {
        self.draws.dot(&ArrayView1::from(x))
    }
}

/// A kernel ready for repeated evaluation.
#[derive(Clone, Debug)]
pub enum PreparedKernel {
    Linear,
    K1,
    K2,
    Mc { kind: McKind, bank: SampleBank },
    Sum(Vec<PreparedKernel>),
}

impl PreparedKernel {
    /// Evaluates without validating norms.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Self::Linear => dot(x, y),
            Self::K1 => k1_from_parts(dot(x, y), angle(x, y)),
            Self::K2 => k2_from_parts(dot(x, y), angle(x, y)),
            Self::Mc { kind, bank } => {
                let px = bank.project(x);
                let py = bank.project(y);
                mc_entry(*kind, dot(x, y), px.view(), py.view())
            }
            Self::Sum(parts) => parts.iter().map(|k| k.eval(x, y)).sum(),
        }
    }

    /// Gram matrix over the rows of `x`, entries for `i ≤ j` mirrored.
    fn gram(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let cos = x.dot(&x.t());
        match self {
            Self::Linear => mirror(n, |i, j| cos[[i, j]]),
            Self::K1 => mirror(n, |i, j| k1_from_parts(cos[[i, j]], row_angle(x, i, j))),
            Self::K2 => mirror(n, |i, j| k2_from_parts(cos[[i, j]], row_angle(x, i, j))),
            Self::Mc { kind, bank } => {
                let proj = x.dot(&bank.draws.t());
                mirror(n, |i, j| {
                    mc_entry(*kind, cos[[i, j]], proj.row(i), proj.row(j))
                })
            }
            Self::Sum(parts) => {
                let mut total = Array2::zeros((n, n));
                for part in parts {
                    total += &part.gram(x);
                }
                total
            }
        }
    }
}

fn mirror<F: Fn(usize, usize) -> f64 + Sync>(n: usize, entry: F) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| entry(i, j)).collect())
        .collect();
    let mut out = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            out[[i, i + k]] = v;
            out[[i + k, i]] = v;
        }
    }
    out
}

fn mc_entry(kind: McKind, c: f64, px: ArrayView1<f64>, py: ArrayView1<f64>) -> f64 {
    let sum: f64 = match kind {
        McKind::FirstLayer => px
            .iter()
            .zip(py.iter())
            .map(|(a, b)| if *a > 0.0 && *b > 0.0 { c } else { 0.0 })
            .sum(),
        McKind::SecondLayer => px
            .iter()
            .zip(py.iter())
            .map(|(a, b)| relu(*a) * relu(*b))
            .sum(),
    };
    sum / px.len() as f64
}

fn check_unit(x: &[f64]) -> Result<()> {
    let norm = l2_norm(x);
    if (norm - 1.0).abs() > UNIT_TOL {
        Err(NtkError::NotUnitNorm { norm })
    } else {
        Ok(())
    }
}

/// Angle `θ` between unit vectors and `sin θ`, from `‖x - y‖` and `‖x + y‖`.
/// Accurate for nearly parallel and nearly antipodal pairs where `arccos` is not.
pub fn angle(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mut minus, mut plus) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        minus += (a - b) * (a - b);
        plus += (a + b) * (a + b);
    }
    let (minus, plus) = (minus.sqrt(), plus.sqrt());
    (2.0 * minus.atan2(plus), 0.5 * minus * plus)
}

fn row_angle(x: &Array2<f64>, i: usize, j: usize) -> (f64, f64) {
    angle(
        x.row(i).as_slice().expect("standard layout"),
        x.row(j).as_slice().expect("standard layout"),
    )
}

fn k1_from_parts(c: f64, (theta, _): (f64, f64)) -> f64 {
    c * (PI - theta) / (2.0 * PI)
}

fn k2_from_parts(c: f64, (theta, sin): (f64, f64)) -> f64 {
    (sin + (PI - theta) * c) / (2.0 * PI)
}

/// `K1` as a function of the cosine, clamped into `[-1, 1]` before `arccos`.
pub fn k1_from_cosine(c: f64) -> f64 {
    let cb = c.clamp(-1.0, 1.0);
    c * (PI - cb.acos()) / (2.0 * PI)
}

pub fn k2_from_cosine(c: f64) -> f64 {
    let cb = c.clamp(-1.0, 1.0);
    ((1.0 - cb * cb).sqrt() + (PI - cb.acos()) * cb) / (2.0 * PI)
}

pub fn k0(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    Ok(dot(x, y))
}

/// Closed-form first-layer kernel; inputs must be unit norm.
pub fn k1(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    check_unit(x)?;
    check_unit(y)?;
    Ok(k1_from_parts(dot(x, y), angle(x, y)))
}

/// Closed-form second-layer kernel; inputs must be unit norm.
pub fn k2(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    check_unit(x)?;
    check_unit(y)?;
    Ok(k2_from_parts(dot(x, y), angle(x, y)))
}

fn kernel_mc(
    kind: McKind,
    x: &[f64],
    y: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    check_dim(x.len(), y.len())?;
    if samples == 0 {
        return Err(invalid("samples", "need at least one Gaussian draw"));
    }
    let c = dot(x, y);
    let mut w = vec![0.0; x.len()];
    let mut acc = MeanAccumulator::default();
    for _ in 0..samples {
        rng::fill_gaussian(rng, &mut w);
        let (a, b) = (dot(&w, x), dot(&w, y));
        acc.push(match kind {
            McKind::FirstLayer => {
                if a > 0.0 && b > 0.0 {
                    c
                } else {
                    0.0
                }
            }
            McKind::SecondLayer => relu(a) * relu(b),
        });
    }
    Ok(acc.finish())
}

/// Sample mean of `⟨x,x'⟩ 1[⟨x,w⟩>0] 1[⟨x',w⟩>0]` over `samples` draws of `w`.
pub fn k1_mc(x: &[f64], y: &[f64], samples: usize, rng: &mut Rng) -> Result<McEstimate> {
    kernel_mc(McKind::FirstLayer, x, y, samples, rng)
}

/// Sample mean of `σ(⟨w,x⟩) σ(⟨w,x'⟩)` over `samples` draws of `w`.
pub fn k2_mc(x: &[f64], y: &[f64], samples: usize, rng: &mut Rng) -> Result<McEstimate> {
    kernel_mc(McKind::SecondLayer, x, y, samples, rng)
}

/// A cached `n × n` kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    entries: Array2<f64>,
    source: String,
    fingerprint: String,
    exact: bool,
}

impl GramMatrix {
    /// Wraps an explicit symmetric matrix (for instance inner products of
    /// finite-width features).
    pub fn from_entries(entries: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        let n = entries.nrows();
        check_dim(n, entries.ncols())?;
        for i in 0..n {
            for j in 0..i {
                let scale = 1.0_f64.max(entries[[i, j]].abs());
                if (entries[[i, j]] - entries[[j, i]]).abs() > 1e-12 * scale {
                    return Err(invalid("gram", format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            entries,
            source: source.into(),
            fingerprint: String::new(),
            exact: true,
        })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// False when entries are Monte Carlo estimates.
    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    /// Smallest eigenvalue of the (symmetric) matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.len();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| self.entries[[i, j]]);
        m.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes `# kernel=..,fingerprint=..,n=..` followed by the rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# kernel={},fingerprint={},n={}",
            self.source,
            self.fingerprint,
            self.len()
        )?;
        for row in self.entries.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn gram(kernel: &KernelFn, data: &Dataset) -> Result<GramMatrix> {
    data.non_empty()?;
    let prepared = kernel.prepare(data.dim())?;
    Ok(GramMatrix {
        entries: prepared.gram(data.features()),
        source: kernel.tag(),
        fingerprint: data.fingerprint(),
        exact: kernel.is_exact(),
    })
}

/// Held-out examples and how often to score them.
#[derive(Clone, Debug)]
pub struct HeldOut<'a> {
    pub data: &'a Dataset,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct KernelSgdConfig {
    pub eta: f64,
    pub n_steps: usize,
    /// Stop as soon as a scored held-out error is at or below this value.
    pub stop_below: Option<f64>,
}

/// The iterate `f = Σ_i c_i k(x_i, ·)` of functional SGD.
#[derive(Clone, Debug)]
pub struct KernelSgdState {
    kernel: KernelFn,
    prepared: PreparedKernel,
    support: Vec<LabeledExample>,
    coeffs: Vec<f64>,
}

impl KernelSgdState {
    pub fn new(kernel: KernelFn, d: usize) -> Result<Self> {
        let prepared = kernel.prepare(d)?;
        Ok(Self {
            kernel,
            prepared,
            support: Vec::new(),
            coeffs: Vec::new(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coeffs)
            .map(|(s, c)| c * self.prepared.eval(s.x(), x))
            .sum()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn support(&self) -> &[LabeledExample] {
        &self.support
    }

    pub fn kernel(&self) -> &KernelFn {
        &self.kernel
    }

    pub fn steps(&self) -> usize {
        self.coeffs.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorPoint {
    /// Number of examples consumed before scoring.
    pub step: usize,
    pub test_error: f64,
}

#[derive(Clone, Debug)]
pub struct KernelSgdRun {
    pub state: KernelSgdState,
    pub error_curve: Vec<ErrorPoint>,
    /// `y_i f_i(x_i)` before each update.
    pub stream_margins: Vec<f64>,
}

impl KernelSgdRun {
    /// First scored step with held-out error at or below `target`.
    pub fn steps_to_error(&self, target: f64) -> Option<usize> {
        self.error_curve
            .iter()
            .find(|p| p.test_error <= target)
            .map(|p| p.step)
    }
}

fn misclassified(pred: f64, y: f64) -> bool {
    y * pred <= 0.0
}

/// Online SGD on the logistic loss in the RKHS of `kernel`.
///
/// Step `i` predicts `f(x_i)` with the current iterate and appends
/// `c_i = -η ℓ'(y_i f(x_i)) y_i`. Held-out predictions are updated
/// incrementally, so scoring at every step costs one kernel row.
pub fn kernel_sgd(
    kernel: KernelFn,
    oracle: &mut dyn Iterator<Item = LabeledExample>,
    d: usize,
    config: &KernelSgdConfig,
    held_out: Option<&HeldOut<'_>>,
) -> Result<KernelSgdRun> {
    if !(config.eta > 0.0) {
        return Err(invalid("eta", "step size must be positive"));
    }
    let mut state = KernelSgdState::new(kernel, d)?;
    let mut held_preds = held_out.map(|h| vec![0.0; h.data.len()]);
    let mut curve = Vec::new();
    let mut margins = Vec::with_capacity(config.n_steps);

    let score = |preds: &[f64], h: &HeldOut<'_>| -> f64 {
        let wrong = preds
            .iter()
            .zip(h.data.labels())
            .filter(|(p, y)| misclassified(**p, **y))
            .count();
        wrong as f64 / h.data.len() as f64
    };

    if let (Some(h), Some(preds)) = (held_out, held_preds.as_ref()) {
        let err = score(preds, h);
        curve.push(ErrorPoint {
            step: 0,
            test_error: err,
        });
        if config.stop_below.is_some_and(|t| err <= t) {
            return Ok(KernelSgdRun {
                state,
                error_curve: curve,
                stream_margins: margins,
            });
        }
    }

    for step in 0..config.n_steps {
        let ex = oracle.next().ok_or(NtkError::OracleExhausted {
            consumed: step,
            requested: config.n_steps,
        })?;
        check_dim(d, ex.dim())?;
        let margin = ex.y() * state.predict(ex.x());
        margins.push(margin);
        let c = -config.eta * logistic_loss_slope(margin) * ex.y();
        if let (Some(h), Some(preds)) = (held_out, held_preds.as_mut()) {
            for (i, p) in preds.iter_mut().enumerate() {
                *p += c * state
                    .prepared
                    .eval(ex.x(), h.data.x(i).as_slice().expect("row"));
            }
        }
        state.coeffs.push(c);
        state.support.push(ex);

        let taken = step + 1;
        if let (Some(h), Some(preds)) = (held_out, held_preds.as_ref()) {
            if taken % h.stride.max(1) == 0 || taken == config.n_steps {
                let err = score(preds, h);
                curve.push(ErrorPoint {
                    step: taken,
                    test_error: err,
                });
                if config.stop_below.is_some_and(|t| err <= t) {
                    break;
                }
            }
        }
    }
    Ok(KernelSgdRun {
        state,
        error_curve: curve,
        stream_margins: margins,
    })
}
