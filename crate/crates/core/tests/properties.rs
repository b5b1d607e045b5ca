use ndarray::Array2;
use ntklab::kernels::{gram, k1, k2, KernelFn};
use ntklab::margin::{margin_objective, solve_margin, SimplexWeights};
use ntklab::model::{init_network, logistic_loss, logistic_loss_slope, Dataset};
use ntklab::rng;
use ntklab::separators::{build_u_bar, xor_region, SeparatorFn, XorRegion};
use proptest::prelude::*;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        .prop_map(unit)
}

fn labeled(n: usize, d: usize) -> impl Strategy<Value = Dataset> {
    (
        prop::collection::vec(unit_vec(d), n),
        prop::collection::vec(prop::bool::ANY, n),
    )
        .prop_map(move |(xs, ys)| {
            let flat: Vec<f64> = xs.into_iter().flatten().collect();
            let x = Array2::from_shape_vec((n, d), flat).unwrap();
            let y = ys.into_iter().map(|b| if b { 1.0 } else { -1.0 }).collect();
            Dataset::from_parts(x, y).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernels_symmetric_and_bounded(x in unit_vec(5), y in unit_vec(5)) {
        for k in [k1, k2] {
            let xy = k(&x, &y).unwrap();
            let yx = k(&y, &x).unwrap();
            prop_assert!((xy - yx).abs() < 1e-12);
            prop_assert!(xy.abs() <= 0.5 + 1e-12);
        }
        prop_assert!(k2(&x, &y).unwrap() >= -1e-12);
        prop_assert!((k1(&x, &x).unwrap() - 0.5).abs() < 1e-12);
        prop_assert!((k2(&x, &x).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gram_is_psd(data in labeled(7, 4)) {
        for kernel in [KernelFn::K1, KernelFn::K2, KernelFn::ntk_both_layers()] {
            let g = gram(&kernel, &data).unwrap();
            prop_assert!(g.min_eigenvalue() >= -1e-9);
        }
    }

    #[test]
    fn loss_decreasing_with_negative_slope(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(logistic_loss(lo) >= logistic_loss(hi));
        prop_assert!(logistic_loss(a) > 0.0);
        let s = logistic_loss_slope(a);
        prop_assert!((-1.0..0.0).contains(&s));
    }

    #[test]
    fn regions_partition_the_plane(z1 in -3.0f64..3.0, z2 in -3.0f64..3.0) {
        let r = xor_region(z1, z2);
        let members = [
            z1 >= 0.0 && z1.abs() >= z2.abs(),
            z1 < 0.0 && z1.abs() >= z2.abs(),
            z2 > 0.0 && z1.abs() < z2.abs(),
            z2 < 0.0 && z1.abs() < z2.abs(),
        ];
        prop_assert_eq!(members.iter().filter(|&&b| b).count(), 1);
        let expect = [XorRegion::A1, XorRegion::A3, XorRegion::A2, XorRegion::A4];
        let idx = members.iter().position(|&b| b).unwrap();
        prop_assert_eq!(r, expect[idx]);
    }

    #[test]
    fn u_bar_rows_have_norm_one_over_sqrt_m(seed in 0u64..1000, m in 1usize..64) {
        let mut r = rng::seeded(seed);
        let params = init_network(m, 6, &mut r).unwrap();
        let sep = SeparatorFn::xor2(6).unwrap();
        let u = build_u_bar(&params.snapshot(), &sep).unwrap();
        let expect = 1.0 / (m as f64).sqrt();
        for row in u.matrix().rows() {
            prop_assert!((row.dot(&row).sqrt() - expect).abs() < 1e-12);
        }
        prop_assert!((u.frobenius_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solver_value_is_a_lower_bound(
        data in labeled(6, 3),
        raw in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let g = gram(&KernelFn::K1, &data).unwrap();
        let result = solve_margin(&g, data.labels(), 1e-10, 100_000).unwrap();
        let total: f64 = raw.iter().sum::<f64>() + 1e-9;
        let q = SimplexWeights::new(raw.iter().map(|v| (v + 1e-9 / 6.0) / total).collect()).unwrap();
        let value = margin_objective(&q, &g, data.labels()).unwrap();
        prop_assert!(value >= result.gamma * result.gamma - 1e-8);
    }
}
