//! Maximum kernel margin over the probability simplex.
//!
//! For a gram matrix `K` and labels `y`, the margin is
//! `γ = √ min_{q ∈ Δ_n} (q⊙y)ᵀ K (q⊙y)`. With `K0` this is the linear margin
//! `γ0`; with `K1` it is the tangent-kernel margin `γ1`.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, NtkError, Result};
use crate::kernels::{gram, GramMatrix, KernelFn};
use crate::model::{l2_norm, Dataset};
use crate::rng::{self, Rng};
use crate::stats::quantile;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 200_000;
/// Weights above this count towards the reported support size.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

const REFRESH_EVERY: usize = 512;

/// A point of the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexWeights {
    q: Vec<f64>,
}

impl SimplexWeights {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(invalid("q", "simplex of dimension zero"));
        }
        if q.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("q", "entries must be finite and nonnegative"));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(invalid("q", format!("entries sum to {total}")));
        }
        Ok(Self { q })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            q: vec![1.0 / n as f64; n],
        }
    }

    pub fn vertex(n: usize, i: usize) -> Self {
        let mut q = vec![0.0; n];
        q[i] = 1.0;
        Self { q }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn support_size(&self) -> usize {
        self.q.iter().filter(|v| **v > SUPPORT_THRESHOLD).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginResult {
    pub gamma: f64,
    pub objective: f64,
    pub q_star: SimplexWeights,
    /// Frank-Wolfe gap at the returned point.
    pub duality_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kernel: String,
    /// False when the gram was a Monte Carlo estimate: `gamma` is then the
    /// margin of the estimated matrix.
    pub exact_gram: bool,
    pub support_size: usize,
}

/// `(q⊙y)ᵀ K (q⊙y)`.
pub fn margin_objective(q: &SimplexWeights, gram: &GramMatrix, labels: &[f64]) -> Result<f64> {
    check_dim(gram.len(), q.len())?;
    check_dim(gram.len(), labels.len())?;
    let v: Vec<f64> = q
        .as_slice()
        .iter()
        .zip(labels)
        .map(|(q, y)| q * y)
        .collect();
    Ok(quad_form(gram.entries(), &v))
}

fn quad_form(k: &Array2<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += k[[i, j]] * v[j];
        }
        total += v[i] * row;
    }
    total
}

fn mat_vec(k: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    k.rows()
        .into_iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Solves the margin program by Frank-Wolfe with away steps and exact line
/// search, starting from the uniform point.
///
/// The stopping rule is the Frank-Wolfe gap `max_e ⟨∇, q - e⟩ ≤ tol`. Running
/// out of iterations is reported through `converged = false`.
pub fn solve_margin(
    gram: &GramMatrix,
    labels: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<MarginResult> {
    let n = gram.len();
    check_dim(n, labels.len())?;
    if n == 0 {
        return Err(NtkError::EmptyDataset);
    }
    if !(tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    if let Some(y) = labels.iter().find(|y| **y != 1.0 && **y != -1.0) {
        return Err(NtkError::InvalidLabel(*y));
    }
    let k = gram.entries();
    let mut q = vec![1.0 / n as f64; n];
    let mut v: Vec<f64> = q.iter().zip(labels).map(|(q, y)| q * y).collect();
    let mut kv = mat_vec(k, &v);

    let mut iterations = 0;
    let mut gap;
    loop {
        if iterations % REFRESH_EVERY == 0 && iterations > 0 {
            kv = mat_vec(k, &v);
        }
        let obj: f64 = v.iter().zip(&kv).map(|(a, b)| a * b).sum();
        // ∇_i = 2 y_i (Kv)_i
        let grad: Vec<f64> = kv.iter().zip(labels).map(|(kv, y)| 2.0 * y * kv).collect();
        let g_dot_q = 2.0 * obj;

        let mut s = 0;
        for i in 1..n {
            if grad[i] < grad[s] {
                s = i;
            }
        }
        gap = g_dot_q - grad[s];
        if gap <= tol || iterations >= max_iters {
            break;
        }
        let mut away = None::<usize>;
        for i in 0..n {
            if q[i] > 0.0 && away.is_none_or(|a| grad[i] > grad[a]) {
                away = Some(i);
            }
        }
        let a = away.expect("some weight is positive");
        let away_gap = grad[a] - g_dot_q;

        if gap >= away_gap || q[a] >= 1.0 {
            // direction e_s - q
            let curv = k[[s, s]] - 2.0 * labels[s] * kv[s] + obj;
            let t = if curv > 0.0 {
                (gap / (2.0 * curv)).min(1.0)
            } else {
                1.0
            };
            for i in 0..n {
                q[i] *= 1.0 - t;
                v[i] *= 1.0 - t;
                kv[i] = (1.0 - t) * kv[i] + t * labels[s] * k[[i, s]];
            }
            q[s] += t;
            v[s] += t * labels[s];
        } else {
            // direction q - e_a
            let t_max = q[a] / (1.0 - q[a]);
            let curv = obj - 2.0 * labels[a] * kv[a] + k[[a, a]];
            let t = if curv > 0.0 {
                (away_gap / (2.0 * curv)).min(t_max)
            } else {
                t_max
            };
            for i in 0..n {
                q[i] *= 1.0 + t;
                v[i] *= 1.0 + t;
                kv[i] = (1.0 + t) * kv[i] - t * labels[a] * k[[i, a]];
            }
            if t >= t_max {
                q[a] = 0.0;
                v[a] = 0.0;
            } else {
                q[a] -= t;
                v[a] -= t * labels[a];
            }
        }
        iterations += 1;
    }

    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= total);
    let q_star = SimplexWeights { q };
    let objective = margin_objective(&q_star, gram, labels)?;
    Ok(MarginResult {
        gamma: objective.max(0.0).sqrt(),
        objective,
        support_size: q_star.support_size(),
        q_star,
        duality_gap: gap,
        iterations,
        converged: gap <= tol,
        kernel: gram.source().to_string(),
        exact_gram: gram.is_exact(),
    })
}

/// `y_i Σ_j q_j y_j K(x_j, x_i) / γ` for every example: the margins of the
/// witness built from the optimal weights.
pub fn witness_margins(
    result: &MarginResult,
    gram: &GramMatrix,
    labels: &[f64],
) -> Result<Vec<f64>> {
    check_dim(gram.len(), labels.len())?;
    check_dim(gram.len(), result.q_star.len())?;
    if result.gamma <= DEFAULT_TOL {
        return Err(NtkError::DegenerateMargin {
            gamma: result.gamma,
        });
    }
    let v: Vec<f64> = result
        .q_star
        .as_slice()
        .iter()
        .zip(labels)
        .map(|(q, y)| q * y)
        .collect();
    Ok(mat_vec(gram.entries(), &v)
        .iter()
        .zip(labels)
        .map(|(kv, y)| y * kv / result.gamma)
        .collect())
}

/// `Σ_j q_j y_j x_j 1[⟨z, x_j⟩ > 0]` at one point `z`.
pub fn witness_direction(q: &[f64], data: &Dataset, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; data.dim()];
    for (j, qj) in q.iter().enumerate() {
        if *qj == 0.0 {
            continue;
        }
        let x = data.x(j);
        let act: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
        if act > 0.0 {
            let c = qj * data.y(j);
            out.iter_mut().zip(x.iter()).for_each(|(o, x)| *o += c * x);
        }
    }
    out
}

/// Largest `‖Σ_j q_j y_j x_j 1[⟨z, x_j⟩ > 0]‖₂` over `z_samples` Gaussian draws.
pub fn witness_supnorm_check(
    result: &MarginResult,
    data: &Dataset,
    z_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_dim(data.len(), result.q_star.len())?;
    let mut best = 0.0f64;
    for _ in 0..z_samples {
        let z = rng::gaussian_vec(rng, data.dim());
        best = best.max(l2_norm(&witness_direction(
            result.q_star.as_slice(),
            data,
            &z,
        )));
    }
    Ok(best)
}

/// `√(max(λ_min, 0) / n)`, a lower bound on the margin for any labels.
pub fn eigen_margin_lower_bound(gram: &GramMatrix) -> f64 {
    (gram.min_eigenvalue().max(0.0) / gram.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomLabelReport {
    pub trials: usize,
    /// Margins of converged trials, in trial order.
    pub gammas: Vec<f64>,
    pub non_converged: usize,
    pub threshold: f64,
    pub fraction_below: f64,
    pub quantiles: Vec<(f64, f64)>,
}

/// `1/√(20n)`.
pub fn random_label_threshold(n: usize) -> f64 {
    1.0 / (20.0 * n as f64).sqrt()
}

/// Solves for `γ1` under `trials` independent uniform relabelings of `data`.
///
/// Trial `t` draws labels from the substream `(seed, "random_label", t)`, so
/// results do not depend on scheduling.
pub fn random_label_experiment(
    data: &Dataset,
    trials: usize,
    seed: u64,
) -> Result<RandomLabelReport> {
    if trials == 0 {
        return Err(invalid("trials", "need at least one trial"));
    }
    let k1 = gram(&KernelFn::K1, data)?;
    let outcomes: Vec<Result<MarginResult>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::substream(seed, &["random_label"], &[t]);
            let y = crate::data::relabel_random(data, &mut r);
            solve_margin(&k1, y.labels(), DEFAULT_TOL, DEFAULT_MAX_ITERS)
        })
        .collect();
    let mut gammas = Vec::with_capacity(trials);
    let mut non_converged = 0;
    for outcome in outcomes {
        let res = outcome?;
        if res.converged {
            gammas.push(res.gamma);
        } else {
            non_converged += 1;
        }
    }
    let threshold = random_label_threshold(data.len());
    let below = gammas.iter().filter(|g| **g <= threshold).count();
    let fraction_below = if gammas.is_empty() {
        0.0
    } else {
        below as f64 / gammas.len() as f64
    };
    let quantiles = [0.05, 0.25, 0.5, 0.75, 0.9, 0.95]
        .iter()
        .map(|p| (*p, quantile(&gammas, *p)))
        .collect();
    Ok(RandomLabelReport {
        trials,
        gammas,
        non_converged,
        threshold,
        fraction_below,
        quantiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::uniform_sphere;
    use crate::model::LabeledExample;
    use ndarray::array;

    fn pair() -> Dataset {
        Dataset::new(vec![
            LabeledExample::new(vec![1.0, 0.0], 1.0).unwrap(),
            LabeledExample::new(vec![-1.0, 0.0], -1.0).unwrap(),
        ])
        .unwrap()
    }

    fn random_instance(n: usize, d: usize, seed: u64) -> Dataset {
        let mut r = rng::seeded(seed);
        let pts = (0..n)
            .map(|i| {
                let y = if i % 2 == 0 { 1.0 } else { -1.0 };
                LabeledExample::new(uniform_sphere(d, &mut r), y).unwrap()
            })
            .collect();
        Dataset::new(pts).unwrap()
    }

    #[test]
    fn objective_hand_values() {
        let data = pair();
        let q = SimplexWeights::uniform(2);
        let g0 = gram(&KernelFn::Linear, &data).unwrap();
        let g1 = gram(&KernelFn::K1, &data).unwrap();
        assert!((margin_objective(&q, &g0, data.labels()).unwrap() - 1.0).abs() < 1e-15);
        assert!((margin_objective(&q, &g1, data.labels()).unwrap() - 0.25).abs() < 1e-15);
        let vtx = SimplexWeights::vertex(2, 1);
        assert_eq!(margin_objective(&vtx, &g1, data.labels()).unwrap(), 0.5);
    }

    #[test]
    fn solver_on_antipodal_pair() {
        let data = pair();
        let g0 = gram(&KernelFn::Linear, &data).unwrap();
        let r0 = solve_margin(&g0, data.labels(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!((r0.gamma - 1.0).abs() < 1e-12);
        let g1 = gram(&KernelFn::K1, &data).unwrap();
        let r1 = solve_margin(&g1, data.labels(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!((r1.gamma - 0.5).abs() < 1e-12);
        assert!(r1.converged);
        let w = witness_margins(&r1, &g1, data.labels()).unwrap();
        assert!(w.iter().all(|m| (m - 0.5).abs() < 1e-12));
        let sup = witness_supnorm_check(&r1, &data, 200, &mut rng::seeded(1)).unwrap();
        assert!(sup <= 0.5 + 1e-15);
    }

    #[test]
    fn single_point() {
        let data = Dataset::new(vec![LabeledExample::new(vec![0.6, 0.8], -1.0).unwrap()]).unwrap();
        let g1 = gram(&KernelFn::K1, &data).unwrap();
        let r = solve_margin(&g1, data.labels(), DEFAULT_TOL, 10).unwrap();
        assert!((r.gamma - 0.5f64.sqrt()).abs() < 1e-15);
        let w = witness_margins(&r, &g1, data.labels()).unwrap();
        assert!((w[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn witness_and_eigen_bound_on_random_instances() {
        for seed in 0..10 {
            let data = random_instance(6, 4, seed);
            let g1 = gram(&KernelFn::K1, &data).unwrap();
            let r = solve_margin(&g1, data.labels(), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            assert!(r.converged, "seed {seed}: gap {}", r.duality_gap);
            assert!(r.gamma >= eigen_margin_lower_bound(&g1) - 1e-8);
            let w = witness_margins(&r, &g1, data.labels()).unwrap();
            assert!(w.iter().all(|m| *m >= r.gamma - 1e-3));
            let flipped: Vec<f64> = data.labels().iter().map(|y| -y).collect();
            let rf = solve_margin(&g1, &flipped, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            assert!((rf.gamma - r.gamma).abs() < 1e-9);
        }
    }

    #[test]
    fn eigen_bound_cases() {
        let ortho = GramMatrix::from_entries(Array2::eye(4) * 0.5, "k1").unwrap();
        assert!((eigen_margin_lower_bound(&ortho) - 0.125f64.sqrt()).abs() < 1e-15);
        let dup = GramMatrix::from_entries(array![[0.5, 0.5], [0.5, 0.5]], "k1").unwrap();
        assert_eq!(eigen_margin_lower_bound(&dup), 0.0);
        let r = solve_margin(&dup, &[1.0, -1.0], DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(r.gamma < 1e-12);
        assert!(matches!(
            witness_margins(&r, &dup, &[1.0, -1.0]),
            Err(NtkError::DegenerateMargin { .. })
        ));
    }

    #[test]
    fn non_convergence_is_reported() {
        let data = random_instance(6, 3, 4);
        let g1 = gram(&KernelFn::K1, &data).unwrap();
        let r = solve_margin(&g1, data.labels(), 1e-300, 3).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }

    #[test]
    fn random_labels_are_reproducible() {
        let data = random_instance(5, 3, 8);
        let a = random_label_experiment(&data, 1, 11).unwrap();
        let b = random_label_experiment(&data, 1, 11).unwrap();
        assert_eq!(a, b);
        let one = Dataset::new(vec![data.example(0)]).unwrap();
        let r = random_label_experiment(&one, 3, 0).unwrap();
        assert!(r.gammas.iter().all(|g| (g - 0.5f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn simplex_validation() {
        assert!(SimplexWeights::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexWeights::new(vec![-0.1, 1.1]).is_err());
        assert!(SimplexWeights::new(vec![0.25, 0.75]).is_ok());
    }
}
