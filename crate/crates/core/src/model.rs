//! The two-layer ReLU network `f(x; W, a) = (1/√m) Σ_s a_s σ(⟨w_s, x⟩)`,
//! the logistic loss, and the empirical quantities built from them.
//!
//! Only the first layer `W` is trained; the output signs `a` are drawn once
//! and never change. Gradients use the strict indicator `1[⟨w_s, x⟩ > 0]`,
//! so a unit sitting exactly at zero pre-activation contributes nothing.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{check_dim, invalid, NtkError, Result};
use crate::rng::{self, Rng};

/// Tolerance on `‖x‖₂ = 1` enforced when an example is built.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// A unit-norm feature vector with a ±1 label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    x: Vec<f64>,
    y: f64,
}

impl LabeledExample {
    pub fn new(x: Vec<f64>, y: f64) -> Result<Self> {
        if y != 1.0 && y != -1.0 {
            return Err(NtkError::InvalidLabel(y));
        }
        let norm = l2_norm(&x);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(NtkError::NotUnitNorm { norm });
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// An ordered collection of examples sharing one dimension.
///
/// Features are stored row-major in an `n × d` matrix so batch quantities can
/// be computed with matrix products. An empty dataset is representable (it is
/// what relabelling an empty set returns) but every risk-type operation
/// rejects it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>) -> Result<Self> {
        let first = examples.first().ok_or(NtkError::EmptyDataset)?;
        let d = first.dim();
        let mut x = Array2::zeros((examples.len(), d));
        let mut y = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            check_dim(d, ex.dim())?;
            x.row_mut(i).assign(&ArrayView1::from(ex.x()));
            y.push(ex.y());
        }
        Ok(Self { x, y })
    }

    /// A dataset with no examples in dimension `d`.
    pub fn empty(d: usize) -> Self {
        Self {
            x: Array2::zeros((0, d)),
            y: Vec::new(),
        }
    }

    /// Builds a dataset from a feature matrix and labels, validating both.
    pub fn from_parts(x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        check_dim(x.nrows(), y.len())?;
        for (row, &label) in x.rows().into_iter().zip(&y) {
            LabeledExample::new(row.to_vec(), label)?;
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn example(&self, i: usize) -> LabeledExample {
        LabeledExample {
            x: self.x.row(i).to_vec(),
            y: self.y[i],
        }
    }

    pub fn examples(&self) -> impl Iterator<Item = LabeledExample> + '_ {
        (0..self.len()).map(|i| self.example(i))
    }

    /// Same features, new labels.
    pub fn with_labels(&self, y: Vec<f64>) -> Result<Self> {
        check_dim(self.len(), y.len())?;
        if let Some(&bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(NtkError::InvalidLabel(bad));
        }
        Ok(Self {
            x: self.x.clone(),
            y,
        })
    }

    /// Keeps the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let x = self.x.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Self { x, y }
    }

    pub(crate) fn non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(NtkError::EmptyDataset)
        } else {
            Ok(())
        }
    }

    /// Hex digest of the exact feature and label bits.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update((self.dim() as u64).to_le_bytes());
        for v in self.x.iter() {
            hasher.update(v.to_le_bytes());
        }
        for v in &self.y {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

/// First-layer weights `W` (rows `w_s`) and the fixed output signs `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    w: Array2<f64>,
    a: Vec<f64>,
}

impl NetworkParams {
    pub fn from_parts(w: Array2<f64>, a: Vec<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(invalid("W", "width and dimension must be at least 1"));
        }
        check_dim(w.nrows(), a.len())?;
        if let Some(&bad) = a.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(invalid("a", format!("output signs must be ±1, got {bad}")));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(NtkError::NonFinite { step: 0 });
        }
        Ok(Self { w, a })
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn signs(&self) -> &[f64] {
        &self.a
    }

    /// Replaces `W`, keeping `a`.
    pub fn set_weights(&mut self, w: Array2<f64>) -> Result<()> {
        check_dim(self.width(), w.nrows())?;
        check_dim(self.dim(), w.ncols())?;
        self.w = w;
        Ok(())
    }

    /// Same signs, different first layer.
    pub fn with_weights(&self, w: Array2<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.set_weights(w)?;
        Ok(out)
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w
    }

    pub fn snapshot(&self) -> InitSnapshot {
        InitSnapshot {
            w0: self.w.clone(),
            a: self.a.clone(),
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.width() as f64).sqrt()
    }
}

/// Frozen copy of the parameters at step 0.
#[derive(Clone, Debug, PartialEq)]
pub struct InitSnapshot {
    w0: Array2<f64>,
    a: Vec<f64>,
}

impl InitSnapshot {
    pub fn weights(&self) -> &Array2<f64> {
        &self.w0
    }

    pub fn signs(&self) -> &[f64] {
        &self.a
    }

    pub fn width(&self) -> usize {
        self.w0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w0.ncols()
    }

    /// Rebuilds the step-0 parameters.
    pub fn params(&self) -> NetworkParams {
        NetworkParams {
            w: self.w0.clone(),
            a: self.a.clone(),
        }
    }
}

/// Draws `w_s(0) ~ N(0, I_d)` row by row, then `a_s ~ unif{±1}`.
pub fn init_network(m: usize, d: usize, rng: &mut Rng) -> Result<NetworkParams> {
    if m == 0 {
        return Err(invalid("m", "width must be at least 1"));
    }
    if d == 0 {
        return Err(invalid("d", "dimension must be at least 1"));
    }
    let mut w = Array2::zeros((m, d));
    rng::fill_gaussian(rng, w.as_slice_mut().expect("standard layout"));
    let a = (0..m)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Ok(NetworkParams { w, a })
}

pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<f64> {
    check_dim(params.dim(), x.len())?;
    let x = ArrayView1::from(x);
    let sum: f64 = params
        .w
        .rows()
        .into_iter()
        .zip(&params.a)
        .map(|(w, a)| a * relu(w.dot(&x)))
        .sum();
    Ok(params.scale() * sum)
}

/// `∂f/∂W` at `x`: row `s` is `(1/√m) a_s 1[⟨w_s, x⟩ > 0] x`.
pub fn feature_map(params: &NetworkParams, x: &[f64]) -> Result<Array2<f64>> {
    check_dim(params.dim(), x.len())?;
    let xv = ArrayView1::from(x);
    let scale = params.scale();
    let mut out = Array2::zeros(params.w.raw_dim());
    for ((w, &a), mut row) in params
        .w
        .rows()
        .into_iter()
        .zip(&params.a)
        .zip(out.rows_mut())
    {
        if w.dot(&xv) > 0.0 {
            row.assign(&(&xv * (scale * a)));
        }
    }
    Ok(out)
}

/// `ℓ(z) = ln(1 + e^{-z})`, evaluated without overflow for any finite `z`.
pub fn logistic_loss(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `ℓ'(z) = -1 / (1 + e^z)`.
pub fn logistic_loss_slope(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

/// Pre-activations `⟨w_s, x_i⟩` as an `n × m` matrix.
pub fn preactivations(w: &Array2<f64>, data: &Dataset) -> Array2<f64> {
    data.features().dot(&w.t())
}

/// Network outputs from pre-activations, summing units left to right.
pub fn outputs_from_preactivations(preact: &Array2<f64>, a: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (a.len() as f64).sqrt();
    let activated = preact.mapv(relu);
    (activated.dot(&ArrayView1::from(a)) * scale).to_vec()
}

/// Everything one full-batch step needs, from one pass over the data.
#[derive(Clone, Debug)]
pub struct BatchEval {
    pub preact: Array2<f64>,
    pub outputs: Vec<f64>,
    pub risk: f64,
    pub qhat: f64,
}

impl BatchEval {
    pub fn new(params: &NetworkParams, data: &Dataset) -> Result<Self> {
        data.non_empty()?;
        check_dim(params.dim(), data.dim())?;
        let preact = preactivations(&params.w, data);
        let outputs = outputs_from_preactivations(&preact, &params.a);
        let n = data.len() as f64;
        let mut risk = 0.0;
        let mut qhat = 0.0;
        for (f, y) in outputs.iter().zip(data.labels()) {
            risk += logistic_loss(y * f);
            qhat += -logistic_loss_slope(y * f);
        }
        Ok(Self {
            preact,
            outputs,
            risk: risk / n,
            qhat: qhat / n,
        })
    }

    /// `∇R̂ = (1/n) Σ ℓ'(y_i f_i) y_i ∇f_i`.
    pub fn gradient(&self, params: &NetworkParams, data: &Dataset) -> Array2<f64> {
        let n = data.len() as f64;
        let coef: Vec<f64> = self
            .outputs
            .iter()
            .zip(data.labels())
            .map(|(f, y)| logistic_loss_slope(y * f) * y / n)
            .collect();
        masked_combination(&self.preact, &coef, params.signs(), data)
    }
}

/// `Σ_i c_i ∇f_i` for the activation pattern in `preact` (rows = examples).
pub(crate) fn masked_combination(
    preact: &Array2<f64>,
    coef: &[f64],
    a: &[f64],
    data: &Dataset,
) -> Array2<f64> {
    let scale = 1.0 / (a.len() as f64).sqrt();
    let sa: Vec<f64> = a.iter().map(|a| scale * a).collect();
    let mut mix = Array2::zeros(preact.raw_dim());
    for ((mut out, z), c) in mix.rows_mut().into_iter().zip(preact.rows()).zip(coef) {
        let out = out.as_slice_mut().expect("standard layout");
        let m = out.len();
        let (z, sa) = (&z.to_slice().expect("standard layout")[..m], &sa[..m]);
        for s in 0..m {
            out[s] = (z[s] > 0.0) as u8 as f64 * sa[s] * c;
        }
    }
    mix.t().dot(data.features())
}

pub fn empirical_risk(params: &NetworkParams, data: &Dataset) -> Result<f64> {
    Ok(BatchEval::new(params, data)?.risk)
}

pub fn risk_gradient(params: &NetworkParams, data: &Dataset) -> Result<Array2<f64>> {
    let eval = BatchEval::new(params, data)?;
    Ok(eval.gradient(params, data))
}

/// `Q̂(W) = (1/n) Σ -ℓ'(y_i f_i(W))`.
pub fn q_hat(params: &NetworkParams, data: &Dataset) -> Result<f64> {
    Ok(BatchEval::new(params, data)?.qhat)
}

/// Predictions `⟨∇f_i(anchor), candidate⟩` of the model linearized at `anchor`.
pub fn linearized_outputs(
    anchor: &NetworkParams,
    candidate: &Array2<f64>,
    data: &Dataset,
) -> Result<Vec<f64>> {
    data.non_empty()?;
    check_dim(anchor.width(), candidate.nrows())?;
    check_dim(anchor.dim(), candidate.ncols())?;
    check_dim(anchor.dim(), data.dim())?;
    let mask_src = preactivations(&anchor.w, data);
    let proj = preactivations(candidate, data);
    Ok(linearized_from_parts(&mask_src, &proj, anchor.signs()))
}

/// `(1/√m) Σ_s a_s 1[mask_is > 0] proj_is` for every row `i`.
pub(crate) fn linearized_from_parts(
    mask_src: &Array2<f64>,
    proj: &Array2<f64>,
    a: &[f64],
) -> Vec<f64> {
    let scale = 1.0 / (a.len() as f64).sqrt();
    let m = a.len();
    mask_src
        .rows()
        .into_iter()
        .zip(proj.rows())
        .map(|(z, p)| {
            let z = &z.to_slice().expect("standard layout")[..m];
            let p = &p.to_slice().expect("standard layout")[..m];
            let mut sum = 0.0;
            for s in 0..m {
                sum += (z[s] > 0.0) as u8 as f64 * a[s] * p[s];
            }
            scale * sum
        })
        .collect()
}

/// `R̂^{(anchor)}(candidate) = (1/n) Σ ℓ(y_i ⟨∇f_i(anchor), candidate⟩)`.
pub fn linearized_risk(
    anchor: &NetworkParams,
    candidate: &Array2<f64>,
    data: &Dataset,
) -> Result<f64> {
    let outputs = linearized_outputs(anchor, candidate, data)?;
    let n = data.len() as f64;
    Ok(outputs
        .iter()
        .zip(data.labels())
        .map(|(f, y)| logistic_loss(y * f))
        .sum::<f64>()
        / n)
}

pub fn frobenius_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn frobenius_norm(a: &Array2<f64>) -> f64 {
    frobenius_inner(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = l2_norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn random_instance(seed: u64, d: usize, m: usize, n: usize) -> (NetworkParams, Dataset) {
        let mut rng = rng::seeded(seed);
        let params = init_network(m, d, &mut rng).unwrap();
        let examples = (0..n)
            .map(|i| {
                let x = unit(&rng::gaussian_vec(&mut rng, d));
                LabeledExample::new(x, if i % 2 == 0 { 1.0 } else { -1.0 }).unwrap()
            })
            .collect();
        (params, Dataset::new(examples).unwrap())
    }

    #[test]
    fn example_validation() {
        assert!(LabeledExample::new(vec![1.0, 0.0], 1.0).is_ok());
        assert!(matches!(
            LabeledExample::new(vec![1.0, 1.0], 1.0),
            Err(NtkError::NotUnitNorm { .. })
        ));
        assert!(matches!(
            LabeledExample::new(vec![1.0, 0.0], 0.5),
            Err(NtkError::InvalidLabel(_))
        ));
    }

    #[test]
    fn init_single_unit_and_determinism() {
        let p = init_network(1, 1, &mut rng::seeded(3)).unwrap();
        assert!(p.signs()[0] == 1.0 || p.signs()[0] == -1.0);
        assert!(p.weights()[[0, 0]].is_finite());
        let p1 = init_network(200, 2, &mut rng::seeded(11)).unwrap();
        let p2 = init_network(200, 2, &mut rng::seeded(11)).unwrap();
        assert_eq!(p1, p2);
        assert!(init_network(0, 2, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn init_sample_moments() {
        let (m, d) = (10_000, 5);
        let p = init_network(m, d, &mut rng::seeded(5)).unwrap();
        for col in p.weights().columns() {
            assert!(col.mean().unwrap().abs() <= 0.05);
        }
        let sign_mean = p.signs().iter().sum::<f64>() / m as f64;
        assert!(sign_mean.abs() <= 0.03, "{sign_mean}");
    }

    #[test]
    fn forward_hand_values() {
        let p = NetworkParams::from_parts(array![[2.0, -1.0]], vec![1.0]).unwrap();
        assert_eq!(forward(&p, &[1.0, 0.0]).unwrap(), 2.0);
        let x = unit(&[0.6, 0.8]);
        let w = Array2::from_shape_fn((4, 2), |(_, j)| x[j]);
        let p = NetworkParams::from_parts(w, vec![1.0, 1.0, -1.0, 1.0]).unwrap();
        assert!((forward(&p, &x).unwrap() - 1.0).abs() < 1e-15);
        let p = NetworkParams::from_parts(array![[-1.0, 0.0]], vec![-1.0]).unwrap();
        assert_eq!(forward(&p, &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            forward(&p, &[1.0]),
            Err(NtkError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn feature_map_rows() {
        let p = NetworkParams::from_parts(array![[2.0, -1.0]], vec![1.0]).unwrap();
        assert_eq!(feature_map(&p, &[1.0, 0.0]).unwrap(), array![[1.0, 0.0]]);
        let p = NetworkParams::from_parts(array![[-1.0, 0.0]], vec![1.0]).unwrap();
        assert_eq!(feature_map(&p, &[1.0, 0.0]).unwrap(), array![[0.0, 0.0]]);
        // zero pre-activation counts as inactive
        let p = NetworkParams::from_parts(array![[0.0, 1.0]], vec![1.0]).unwrap();
        assert_eq!(feature_map(&p, &[1.0, 0.0]).unwrap(), array![[0.0, 0.0]]);
    }

    #[test]
    fn loss_values() {
        assert!((logistic_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(logistic_loss_slope(0.0), -0.5);
        assert!((logistic_loss(-800.0) - 800.0).abs() < 1e-9);
        assert!((logistic_loss_slope(-800.0) + 1.0).abs() < 1e-15);
        assert!(logistic_loss(800.0).is_finite() && logistic_loss(800.0) >= 0.0);
        assert!((logistic_loss(20.0) - 2.0611536203143807e-9).abs() < 1e-22);
    }

    #[test]
    fn zero_weights_give_ln2_and_half() {
        let (p, data) = random_instance(1, 4, 6, 5);
        let p = p.with_weights(Array2::zeros((6, 4))).unwrap();
        assert!((empirical_risk(&p, &data).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((q_hat(&p, &data).unwrap() - 0.5).abs() < 1e-15);
        let z = Array2::zeros((6, 4));
        let (anchor, _) = random_instance(2, 4, 6, 5);
        assert!(
            (linearized_risk(&anchor, &z, &data).unwrap() - std::f64::consts::LN_2).abs() < 1e-15
        );
    }

    #[test]
    fn perfect_fit_single_example() {
        // one unit aligned with x, output 20
        let x = vec![1.0, 0.0];
        let p = NetworkParams::from_parts(array![[20.0, 0.0]], vec![1.0]).unwrap();
        let data = Dataset::new(vec![LabeledExample::new(x, 1.0).unwrap()]).unwrap();
        let r = empirical_risk(&p, &data).unwrap();
        assert!((r - 2.0611536203143807e-9).abs() < 1e-20);
        let p = NetworkParams::from_parts(array![[30.0, 0.0]], vec![1.0]).unwrap();
        assert!(q_hat(&p, &data).unwrap() <= 1e-13);
    }

    #[test]
    fn empty_dataset_rejected() {
        let p = init_network(3, 2, &mut rng::seeded(0)).unwrap();
        let data = Dataset::empty(2);
        assert!(matches!(
            empirical_risk(&p, &data),
            Err(NtkError::EmptyDataset)
        ));
        assert!(matches!(q_hat(&p, &data), Err(NtkError::EmptyDataset)));
        assert!(matches!(
            risk_gradient(&p, &data),
            Err(NtkError::EmptyDataset)
        ));
    }

    #[test]
    fn linearized_risk_at_anchor_equals_risk() {
        let (p, data) = random_instance(9, 5, 12, 7);
        let lin = linearized_risk(&p, p.weights(), &data).unwrap();
        let risk = empirical_risk(&p, &data).unwrap();
        assert!((lin - risk).abs() < 1e-12);
        let doubled = p.weights() * 2.0;
        let base = linearized_outputs(&p, p.weights(), &data).unwrap();
        let twice = linearized_outputs(&p, &doubled, &data).unwrap();
        for (b, t) in base.iter().zip(&twice) {
            assert!((2.0 * b - t).abs() < 1e-12);
        }
    }

    #[test]
    fn risk_gradient_matches_central_differences() {
        let (p, data) = random_instance(21, 5, 8, 6);
        let grad = risk_gradient(&p, &data).unwrap();
        let h = 1e-5;
        for s in 0..8 {
            for j in 0..5 {
                let mut plus = p.weights().clone();
                plus[[s, j]] += h;
                let mut minus = p.weights().clone();
                minus[[s, j]] -= h;
                let fd = (empirical_risk(&p.with_weights(plus).unwrap(), &data).unwrap()
                    - empirical_risk(&p.with_weights(minus).unwrap(), &data).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - grad[[s, j]]).abs() < 1e-6,
                    "({s},{j}): {fd} vs {}",
                    grad[[s, j]]
                );
            }
        }
    }

    #[test]
    fn dataset_fingerprint_tracks_labels() {
        let (_, data) = random_instance(4, 3, 2, 4);
        let flipped = data
            .with_labels(data.labels().iter().map(|y| -y).collect())
            .unwrap();
        assert_eq!(data.fingerprint(), data.clone().fingerprint());
        assert_ne!(data.fingerprint(), flipped.fingerprint());
    }
}
