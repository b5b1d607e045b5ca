//! Synthetic datasets: the noisy 2-XOR family, linearly separable data with a
//! planted margin, and random relabelling. Every generator emits unit-norm
//! features.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{invalid, NtkError, Result};
use crate::model::{dot, l2_norm, Dataset, LabeledExample};
use crate::rng::{self, Rng};

/// Largest exhaustive 2-XOR support generated by default.
pub const DEFAULT_EXHAUSTIVE_CAP: usize = 1 << 16;

/// Rejection sampling gives up below this expected acceptance rate.
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every point of a finite support, in a fixed order.
    Exhaustive,
    /// `n` independent draws.
    Iid(usize),
}

/// A data distribution the experiments can sample from.
#[derive(Clone, Debug, PartialEq)]
pub enum DistributionSpec {
    Xor2 { d: usize },
    LinearMargin { d: usize, gamma0: f64, u: Vec<f64> },
    Finite { data: Dataset },
}

impl DistributionSpec {
    pub fn xor2(d: usize) -> Result<Self> {
        if d < 3 {
            return Err(invalid("d", "2-XOR needs d >= 3"));
        }
        Ok(Self::Xor2 { d })
    }

    pub fn linear(u: Vec<f64>, gamma0: f64) -> Result<Self> {
        if !(gamma0 > 0.0 && gamma0 < 1.0) {
            return Err(invalid("gamma0", "must lie in (0, 1)"));
        }
        if (l2_norm(&u) - 1.0).abs() > 1e-9 {
            return Err(invalid("u", "planted direction must be unit norm"));
        }
        let rate = linear_acceptance_rate(u.len(), gamma0);
        if rate < MIN_ACCEPTANCE_RATE {
            return Err(NtkError::AcceptanceTooLow { rate });
        }
        Ok(Self::LinearMargin {
            d: u.len(),
            gamma0,
            u,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Xor2 { d } | Self::LinearMargin { d, .. } => *d,
            Self::Finite { data } => data.dim(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Xor2 { .. } => "xor2",
            Self::LinearMargin { .. } => "linear",
            Self::Finite { .. } => "finite",
        }
    }

    /// One draw from the distribution.
    pub fn sample(&self, rng: &mut Rng) -> LabeledExample {
        match self {
            Self::Xor2 { d } => xor2_sample(*d, rng),
            Self::LinearMargin { d, gamma0, u } => loop {
                let x = uniform_sphere(*d, rng);
                let proj = dot(&x, u);
                if proj.abs() >= *gamma0 {
                    let y = if proj > 0.0 { 1.0 } else { -1.0 };
                    break LabeledExample::new(x, y).expect("unit norm by construction");
                }
            },
            Self::Finite { data } => data.example(rng.random_range(0..data.len())),
        }
    }

    pub fn sample_n(&self, n: usize, rng: &mut Rng) -> Dataset {
        if n == 0 {
            return Dataset::empty(self.dim());
        }
        Dataset::new((0..n).map(|_| self.sample(rng)).collect()).expect("consistent dimension")
    }

    /// An endless stream of independent draws.
    pub fn stream(&self, mut rng: Rng) -> impl Iterator<Item = LabeledExample> + '_ {
        std::iter::repeat_with(move || self.sample(&mut rng))
    }
}

/// Expected acceptance of `|⟨u, x⟩| ≥ γ0` for `x` uniform on the sphere in `R^d`.
pub fn linear_acceptance_rate(d: usize, gamma0: f64) -> f64 {
    if d <= 1 {
        return 1.0;
    }
    // ⟨u, x⟩² ~ Beta(1/2, (d-1)/2)
    beta_reg((d as f64 - 1.0) / 2.0, 0.5, 1.0 - gamma0 * gamma0)
}

pub fn uniform_sphere(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let g = rng::gaussian_vec(rng, d);
        let norm = l2_norm(&g);
        if norm > 1e-12 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Noise coordinate magnitude `1/√(d-1)`.
pub fn xor2_scale(d: usize) -> f64 {
    1.0 / ((d - 1) as f64).sqrt()
}

/// The four labelled prototypes `(x1, x2, y)` before scaling.
pub const XOR2_PROTOTYPES: [(f64, f64, f64); 4] = [
    (1.0, 0.0, 1.0),
    (0.0, 1.0, -1.0),
    (-1.0, 0.0, 1.0),
    (0.0, -1.0, -1.0),
];

/// The 2-XOR point for `prototype ∈ 0..4` and a noise pattern given as signs.
pub fn xor2_point(d: usize, prototype: usize, noise_signs: &[f64]) -> LabeledExample {
    assert_eq!(noise_signs.len(), d - 2);
    let c = xor2_scale(d);
    let (p1, p2, y) = XOR2_PROTOTYPES[prototype];
    let mut x = Vec::with_capacity(d);
    x.push(p1 * c);
    x.push(p2 * c);
    x.extend(noise_signs.iter().map(|s| s * c));
    LabeledExample::new(x, y).expect("2-XOR points are unit norm")
}

/// Noise pattern number `index`: bit `k` set means coordinate `k + 2` is positive.
pub fn noise_pattern(d: usize, index: u64) -> Vec<f64> {
    (0..d - 2)
        .map(|k| if (index >> k) & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

fn xor2_sample(d: usize, rng: &mut Rng) -> LabeledExample {
    let proto = rng.random_range(0..4);
    let noise: Vec<f64> = (0..d - 2)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    xor2_point(d, proto, &noise)
}

pub fn make_xor2(d: usize, mode: SamplingMode, rng: &mut Rng) -> Result<Dataset> {
    make_xor2_capped(d, mode, rng, DEFAULT_EXHAUSTIVE_CAP)
}

/// Noisy 2-XOR data. Exhaustive mode lists prototypes in order, each with all
/// `2^(d-2)` noise patterns.
pub fn make_xor2_capped(
    d: usize,
    mode: SamplingMode,
    rng: &mut Rng,
    cap: usize,
) -> Result<Dataset> {
    let spec = DistributionSpec::xor2(d)?;
    match mode {
        SamplingMode::Exhaustive => {
            let required = 4u128 << (d - 2).min(120);
            if d - 2 >= 64 || required > cap as u128 {
                return Err(NtkError::CapExceeded { required, cap });
            }
            let patterns = 1u64 << (d - 2);
            let mut examples = Vec::with_capacity(required as usize);
            for proto in 0..4 {
                for p in 0..patterns {
                    examples.push(xor2_point(d, proto, &noise_pattern(d, p)));
                }
            }
            Dataset::new(examples)
        }
        SamplingMode::Iid(n) => Ok(spec.sample_n(n, rng)),
    }
}

/// Linearly separable data with `y⟨u, x⟩ ≥ γ0` for a planted unit vector `u`
/// drawn uniformly from the sphere. Returns the data and `u`.
pub fn make_linear(d: usize, gamma0: f64, n: usize, rng: &mut Rng) -> Result<(Dataset, Vec<f64>)> {
    if d == 0 {
        return Err(invalid("d", "dimension must be at least 1"));
    }
    let u = uniform_sphere(d, rng);
    let spec = DistributionSpec::linear(u.clone(), gamma0)?;
    Ok((spec.sample_n(n, rng), u))
}

/// Replaces every label by an independent uniform sign.
pub fn relabel_random(data: &Dataset, rng: &mut Rng) -> Dataset {
    let y = (0..data.len())
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    data.with_labels(y).expect("labels are ±1")
}

/// Writes `# d=..,n=..,generator=..,seed=..`, a column header, then one row per example.
pub fn write_dataset_csv<W: Write>(
    data: &Dataset,
    generator: &str,
    seed: u64,
    mut out: W,
) -> Result<()> {
    writeln!(
        out,
        "# d={},n={},generator={},seed={}",
        data.dim(),
        data.len(),
        generator,
        seed
    )?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x_{j}")).collect();
    header.push("y".into());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.x(i).iter().map(|v| format!("{v:.16e}")).collect();
        row.push(format!("{}", data.y(i) as i64));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_dataset_csv<R: BufRead>(input: R) -> Result<Dataset> {
    let mut d = None;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("x_") {
            d = Some(line.split(',').count() - 1);
            continue;
        }
        let dim = d.ok_or_else(|| NtkError::Config("dataset CSV has no column header".into()))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(NtkError::DimensionMismatch {
                expected: dim + 1,
                found: fields.len(),
            });
        }
        for f in &fields[..dim] {
            xs.push(
                f.parse::<f64>()
                    .map_err(|e| NtkError::Config(format!("bad feature `{f}`: {e}")))?,
            );
        }
        ys.push(
            fields[dim]
                .parse::<f64>()
                .map_err(|e| NtkError::Config(format!("bad label: {e}")))?,
        );
    }
    let dim = d.ok_or_else(|| NtkError::Config("dataset CSV has no column header".into()))?;
    let x =
        Array2::from_shape_vec((ys.len(), dim), xs).map_err(|e| NtkError::Config(e.to_string()))?;
    Dataset::from_parts(x, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn xor2_exhaustive_d3() {
        let data = make_xor2(3, SamplingMode::Exhaustive, &mut rng::seeded(0)).unwrap();
        assert_eq!(data.len(), 8);
        for i in 0..data.len() {
            assert!((l2_norm(data.x(i).as_slice().unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn xor2_labels_follow_first_two_coordinates() {
        let d = 6;
        let data = make_xor2(d, SamplingMode::Exhaustive, &mut rng::seeded(0)).unwrap();
        let c = xor2_scale(d);
        let mut distinct = BTreeSet::new();
        for i in 0..data.len() {
            let x = data.x(i);
            let y = data.y(i);
            assert_eq!(y == 1.0, x[1] == 0.0);
            if x[0] == c && x[1] == 0.0 {
                assert_eq!(y, 1.0);
            }
            for v in x.iter().skip(2) {
                assert_eq!(v.abs(), c);
            }
            distinct.insert(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(distinct.len(), 1 << d);
    }

    #[test]
    fn xor2_validation_and_cap() {
        assert!(make_xor2(2, SamplingMode::Iid(4), &mut rng::seeded(0)).is_err());
        let err = make_xor2_capped(10, SamplingMode::Exhaustive, &mut rng::seeded(0), 100);
        assert!(matches!(err, Err(NtkError::CapExceeded { .. })));
    }

    #[test]
    fn xor2_iid_reproducible() {
        let a = make_xor2(10, SamplingMode::Iid(256), &mut rng::seeded(4)).unwrap();
        let b = make_xor2(10, SamplingMode::Iid(256), &mut rng::seeded(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_margin_audit() {
        let gamma0 = 0.2;
        let (data, u) = make_linear(20, gamma0, 200, &mut rng::seeded(8)).unwrap();
        for ex in data.examples() {
            assert!(ex.y() * dot(ex.x(), &u) >= gamma0);
            assert!((l2_norm(ex.x()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_near_unit_margin_aborts_cleanly() {
        // in d = 2 the acceptance region shrinks but stays reachable at 0.99
        assert!(make_linear(2, 0.99, 10, &mut rng::seeded(1)).is_ok());
        let err = make_linear(50, 0.9, 10, &mut rng::seeded(1));
        assert!(matches!(err, Err(NtkError::AcceptanceTooLow { .. })));
        assert!(make_linear(5, 1.0, 10, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn acceptance_rate_matches_closed_form_in_2d() {
        let g: f64 = 0.3;
        let expected = 1.0 - 2.0 / std::f64::consts::PI * g.asin();
        assert!((linear_acceptance_rate(2, g) - expected).abs() < 1e-12);
    }

    #[test]
    fn relabel_edge_cases() {
        let empty = Dataset::empty(3);
        assert!(relabel_random(&empty, &mut rng::seeded(0)).is_empty());
        let data = make_xor2(4, SamplingMode::Exhaustive, &mut rng::seeded(0)).unwrap();
        let a = relabel_random(&data, &mut rng::seeded(5));
        let b = relabel_random(&data, &mut rng::seeded(5));
        assert_eq!(a, b);
        assert_eq!(a.features(), data.features());
    }

    #[test]
    fn relabel_mean_is_centred() {
        let big = DistributionSpec::xor2(5)
            .unwrap()
            .sample_n(10_000, &mut rng::seeded(2));
        let relabelled = relabel_random(&big, &mut rng::seeded(3));
        let mean = relabelled.labels().iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() <= 0.05);
    }

    #[test]
    fn csv_roundtrip() {
        let data = make_xor2(4, SamplingMode::Iid(12), &mut rng::seeded(6)).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&data, "xor2", 6, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# d=4,n=12,generator=xor2,seed=6\nx_0,x_1,x_2,x_3,y\n"));
        let back = read_dataset_csv(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }
}
