//! Separators `v̄ : R^d → R^d` with `‖v̄(z)‖₂ ≤ 1`, their margins, and the
//! finite-width checks built on them.
//!
//! A separator has population margin `γ` on `(x, y)` when
//! `y E_z[⟨v̄(z), x⟩ 1[⟨z, x⟩ > 0]] ≥ γ` for `z ~ N(0, I_d)`.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{noise_pattern, xor2_point};
use crate::error::{check_dim, invalid, Result};
use crate::kernels::GramMatrix;
use crate::margin::{self, witness_direction, MarginResult};
use crate::model::{
    dot, feature_map, init_network, l2_norm, linearized_from_parts, outputs_from_preactivations,
    preactivations, Dataset, InitSnapshot, LabeledExample, NetworkParams,
};
use crate::rng::{self, Rng};
use crate::stats::{McEstimate, MeanAccumulator};

/// One of the four regions of the plane used by the 2-XOR separator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum XorRegion {
    A1,
    A2,
    A3,
    A4,
}

/// Region of `(z1, z2)`. The origin belongs to `A1`.
pub fn xor_region(z1: f64, z2: f64) -> XorRegion {
    if z1 >= 0.0 && z1.abs() >= z2.abs() {
        XorRegion::A1
    } else if z1 <= 0.0 && z1.abs() >= z2.abs() {
        XorRegion::A3
    } else if z2 > 0.0 {
        XorRegion::A2
    } else {
        XorRegion::A4
    }
}

/// Index and sign of the single nonzero coordinate of the 2-XOR separator.
fn xor_direction(z1: f64, z2: f64) -> (usize, f64) {
    match xor_region(z1, z2) {
        XorRegion::A1 => (0, 1.0),
        XorRegion::A2 => (1, -1.0),
        XorRegion::A3 => (0, -1.0),
        XorRegion::A4 => (1, 1.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SeparatorFn {
    /// The constant map `z ↦ u` for a unit vector `u`.
    Linear {
        u: Vec<f64>,
    },
    Xor2 {
        d: usize,
    },
    /// `z ↦ Σ_j q_j y_j x_j 1[⟨z, x_j⟩ > 0]` from a solved margin program.
    ///
    /// This is `γ1 v̂(z)` for the witness `v̂`; it has norm at most one and
    /// margin at least `γ1²` on the support points.
    KernelWitness {
        q: Vec<f64>,
        support: Dataset,
        gamma1: f64,
    },
    Zero {
        d: usize,
    },
}

impl SeparatorFn {
    pub fn linear(u: Vec<f64>) -> Result<Self> {
        if (l2_norm(&u) - 1.0).abs() > 1e-9 {
            return Err(invalid("u", "separator direction must be unit norm"));
        }
        Ok(Self::Linear { u })
    }

    pub fn xor2(d: usize) -> Result<Self> {
        if d < 3 {
            return Err(invalid("d", "2-XOR needs d >= 3"));
        }
        Ok(Self::Xor2 { d })
    }

    /// Wraps a converged margin solution on `support`.
    pub fn kernel_witness(result: &MarginResult, support: &Dataset) -> Result<Self> {
        check_dim(support.len(), result.q_star.len())?;
        if result.gamma <= margin::DEFAULT_TOL {
            return Err(crate::NtkError::DegenerateMargin {
                gamma: result.gamma,
            });
        }
        Ok(Self::KernelWitness {
            q: result.q_star.as_slice().to_vec(),
            support: support.clone(),
            gamma1: result.gamma,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Linear { u } => u.len(),
            Self::Xor2 { d } | Self::Zero { d } => *d,
            Self::KernelWitness { support, .. } => support.dim(),
        }
    }

    /// `⟨v̄(z), x⟩` without materializing `v̄(z)`.
    pub fn dot_at(&self, z: &[f64], x: &[f64]) -> f64 {
        match self {
            Self::Linear { u } => dot(u, x),
            Self::Xor2 { .. } => {
                let (k, s) = xor_direction(z[0], z[1]);
                s * x[k]
            }
            Self::KernelWitness { q, support, .. } => dot(&witness_direction(q, support, z), x),
            Self::Zero { .. } => 0.0,
        }
    }
}

pub fn separator_value(sep: &SeparatorFn, z: &[f64]) -> Result<Vec<f64>> {
    check_dim(sep.dim(), z.len())?;
    Ok(match sep {
        SeparatorFn::Linear { u } => u.clone(),
        SeparatorFn::Xor2 { d } => {
            let mut v = vec![0.0; *d];
            let (k, s) = xor_direction(z[0], z[1]);
            v[k] = s;
            v
        }
        SeparatorFn::KernelWitness { q, support, .. } => witness_direction(q, support, z),
        SeparatorFn::Zero { d } => vec![0.0; *d],
    })
}

/// Monte Carlo estimate of `y E_z[⟨v̄(z), x⟩ 1[⟨z, x⟩ > 0]]`.
pub fn population_margin_mc(
    sep: &SeparatorFn,
    example: &LabeledExample,
    samples: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    check_dim(sep.dim(), example.dim())?;
    if samples == 0 {
        return Err(invalid("samples", "need at least one Gaussian draw"));
    }
    let x = example.x();
    let mut z = vec![0.0; x.len()];
    let mut acc = MeanAccumulator::default();
    for _ in 0..samples {
        rng::fill_gaussian(rng, &mut z);
        let value = if dot(&z, x) > 0.0 {
            example.y() * sep.dot_at(&z, x)
        } else {
            0.0
        };
        acc.push(value);
    }
    Ok(acc.finish())
}

/// `Ū` with rows `a_s v̄(w_s(0)) / √m`.
#[derive(Clone, Debug, PartialEq)]
pub struct UBarMatrix {
    rows: Array2<f64>,
}

impl UBarMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.rows
    }

    pub fn frobenius_norm(&self) -> f64 {
        crate::model::frobenius_norm(&self.rows)
    }

    pub fn max_row_norm(&self) -> f64 {
        self.rows
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max)
    }
}

pub fn build_u_bar(init: &InitSnapshot, sep: &SeparatorFn) -> Result<UBarMatrix> {
    check_dim(init.dim(), sep.dim())?;
    let m = init.width();
    let scale = 1.0 / (m as f64).sqrt();
    let mut rows = Array2::zeros((m, init.dim()));
    for (s, (w, a)) in init
        .weights()
        .rows()
        .into_iter()
        .zip(init.signs())
        .enumerate()
    {
        let v = separator_value(sep, w.as_slice().expect("standard layout"))?;
        for (k, vk) in v.into_iter().enumerate() {
            rows[[s, k]] = scale * a * vk;
        }
    }
    Ok(UBarMatrix { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMargin {
    pub min: f64,
    pub per_example: Vec<f64>,
}

/// `y_i ⟨∇f_i(W), Ū⟩` for every example, and the minimum.
pub fn finite_margin(
    params: &NetworkParams,
    u_bar: &Array2<f64>,
    data: &Dataset,
) -> Result<FiniteMargin> {
    data.non_empty()?;
    check_dim(params.width(), u_bar.nrows())?;
    check_dim(params.dim(), u_bar.ncols())?;
    check_dim(params.dim(), data.dim())?;
    let mask = preactivations(params.weights(), data);
    let proj = preactivations(u_bar, data);
    finite_margin_from_parts(&mask, &proj, params.signs(), data.labels())
}

pub(crate) fn finite_margin_from_parts(
    mask: &Array2<f64>,
    proj: &Array2<f64>,
    a: &[f64],
    labels: &[f64],
) -> Result<FiniteMargin> {
    let per_example: Vec<f64> = linearized_from_parts(mask, proj, a)
        .iter()
        .zip(labels)
        .map(|(f, y)| y * f)
        .collect();
    let min = per_example.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(FiniteMargin { min, per_example })
}

/// `α(W, ε₂) = (1/m) Σ_s 1[|⟨w_s, x⟩| ≤ ε₂]`.
pub fn near_activation_fraction(params: &NetworkParams, x: &[f64], eps2: f64) -> Result<f64> {
    check_dim(params.dim(), x.len())?;
    if !(eps2 >= 0.0) {
        return Err(invalid("eps2", "must be nonnegative"));
    }
    let near = params
        .weights()
        .rows()
        .into_iter()
        .filter(|w| dot(w.as_slice().expect("standard layout"), x).abs() <= eps2)
        .count();
    Ok(near as f64 / params.width() as f64)
}

/// `α_i` for every example from precomputed pre-activations.
pub(crate) fn near_activation_fractions(preact: &Array2<f64>, eps2: f64) -> Vec<f64> {
    let m = preact.ncols() as f64;
    preact
        .rows()
        .into_iter()
        .map(|z| z.iter().filter(|v| v.abs() <= eps2).count() as f64 / m)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitOutputReport {
    pub abs_outputs: Vec<f64>,
    /// `√(2 ln(4n/δ))`.
    pub threshold: f64,
    pub violations: usize,
    /// Whether `m ≥ 25 ln(2n/δ)`; below this the bound is not promised.
    pub width_sufficient: bool,
}

pub fn init_output_threshold(n: usize, delta: f64) -> f64 {
    (2.0 * (4.0 * n as f64 / delta).ln()).sqrt()
}

pub fn init_output_check(
    params: &NetworkParams,
    data: &Dataset,
    delta: f64,
) -> Result<InitOutputReport> {
    data.non_empty()?;
    check_dim(params.dim(), data.dim())?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", "must lie in (0, 1)"));
    }
    let preact = preactivations(params.weights(), data);
    let outputs = outputs_from_preactivations(&preact, params.signs());
    let n = data.len();
    let threshold = init_output_threshold(n, delta);
    let abs_outputs: Vec<f64> = outputs.iter().map(|f| f.abs()).collect();
    let violations = abs_outputs.iter().filter(|f| **f > threshold).count();
    Ok(InitOutputReport {
        abs_outputs,
        threshold,
        violations,
        width_sufficient: params.width() as f64 >= 25.0 * (2.0 * n as f64 / delta).ln(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkLbReport {
    pub d: usize,
    pub m: usize,
    pub trials: usize,
    pub degenerate: usize,
    pub frequency: f64,
    /// Largest feature-gram margin over degenerate draws (zero if none).
    pub max_degenerate_gamma: f64,
}

/// The four 2-XOR points sharing noise pattern `pattern`.
pub fn xor_quadruple(d: usize, pattern: u64) -> Dataset {
    let noise = noise_pattern(d, pattern);
    Dataset::new((0..4).map(|p| xor2_point(d, p, &noise)).collect()).expect("consistent dimension")
}

/// Gram matrix of the flattened tangent features `∇f_i(W)`.
pub fn feature_gram(params: &NetworkParams, data: &Dataset) -> Result<GramMatrix> {
    let feats: Vec<Array2<f64>> = data
        .examples()
        .map(|ex| feature_map(params, ex.x()))
        .collect::<Result<_>>()?;
    let n = feats.len();
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = crate::model::frobenius_inner(&feats[i], &feats[j]);
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    GramMatrix::from_entries(g, "tangent_features")
}

/// Whether every unit has the same activation on all rows of `data`.
pub fn activation_pattern_degenerate(params: &NetworkParams, data: &Dataset) -> bool {
    let preact = preactivations(params.weights(), data);
    (0..params.width()).all(|s| {
        let first = preact[[0, s]] > 0.0;
        (1..data.len()).all(|i| (preact[[i, s]] > 0.0) == first)
    })
}

/// Frequency over `trials` initializations of width `m` of the event that all
/// units see identical activation patterns on four 2-XOR points with a common
/// noise pattern. On each such draw the margin of the tangent features is
/// solved as well.
///
/// Trial `t` uses the substream `(seed, "ntk_lb", t)`.
pub fn ntk_lb_simulation(d: usize, m: usize, trials: usize, seed: u64) -> Result<NtkLbReport> {
    if d < 20 {
        return Err(invalid("d", "the lower-bound construction needs d >= 20"));
    }
    if trials == 0 || m == 0 {
        return Err(invalid("trials", "need at least one trial and one unit"));
    }
    let outcomes: Vec<Result<Option<f64>>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::substream(seed, &["ntk_lb"], &[t]);
            let params = init_network(m, d, &mut r)?;
            let noise: Vec<f64> = (0..d - 2)
                .map(|_| {
                    if rand::Rng::random::<bool>(&mut r) {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect();
            let quad = Dataset::new((0..4).map(|p| xor2_point(d, p, &noise)).collect())?;
            if !activation_pattern_degenerate(&params, &quad) {
                return Ok(None);
            }
            let g = feature_gram(&params, &quad)?;
            let res = margin::solve_margin(
                &g,
                quad.labels(),
                margin::DEFAULT_TOL,
                margin::DEFAULT_MAX_ITERS,
            )?;
            Ok(Some(res.gamma))
        })
        .collect();
    let mut degenerate = 0;
    let mut max_gamma = 0.0f64;
    for o in outcomes {
        if let Some(g) = o? {
            degenerate += 1;
            max_gamma = max_gamma.max(g);
        }
    }
    Ok(NtkLbReport {
        d,
        m,
        trials,
        degenerate,
        frequency: degenerate as f64 / trials as f64,
        max_degenerate_gamma: max_gamma,
    })
}
