use candle_core::{Device, Tensor};
use nalgebra::Matrix3;
use prism_core::eval::metrics::{auc, corner_error};
use prism_core::grid::{CoarseGrid, PatchMask};
use prism_core::matcher::{format_significant, select_coarse, weighted_dual_softmax, ScoreMatrix};
use prism_core::mi::{normalized_mi, DiscreteJoint};
use prism_core::mpm::update_mask;
use prism_core::rope::{initial_frequencies, rotate};
use proptest::prelude::*;

fn tensor(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=rows, 1..=cols).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-10.0..10.0f64, r * c)))
}

fn near_identity() -> impl Strategy<Value = Matrix3<f64>> {
    prop::collection::vec(-0.05..0.05f64, 8).prop_map(|v| {
        Matrix3::new(
            1.0 + v[0],
            v[1],
            40.0 * v[2],
            v[3],
            1.0 + v[4],
            40.0 * v[5],
            v[6] / 100.0,
            v[7] / 100.0,
            1.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dual_softmax_is_bounded_by_relevance((r, c, s) in matrix(6, 6), seed in 0u64..1000) {
        let sa: Vec<f64> = (0..r).map(|i| ((seed + i as u64 * 7) % 97) as f64 / 97.0).collect();
        let sb: Vec<f64> = (0..c).map(|j| ((seed + j as u64 * 13) % 89) as f64 / 89.0).collect();
        let p = weighted_dual_softmax(&tensor(&s, &[r, c]), &tensor(&sa, &[r]), &tensor(&sb, &[c])).unwrap();
        let p = p.to_vec2::<f64>().unwrap();
        for i in 0..r {
            for j in 0..c {
                prop_assert!(p[i][j] >= 0.0 && p[i][j] <= sa[i] * sb[j] + 1e-15);
            }
            prop_assert!(p[i].iter().sum::<f64>() <= sa[i] + 1e-12);
        }
        for j in 0..c {
            prop_assert!((0..r).map(|i| p[i][j]).sum::<f64>() <= sb[j] + 1e-12);
        }
    }

    #[test]
    fn selected_matches_are_mutual_and_unique(
        (r, c, raw) in matrix(7, 7),
        theta in 0.0..0.5f64,
        keep_bits in any::<u64>(),
    ) {
        let data: Vec<f64> = raw.iter().map(|v| (v + 10.0) / 20.0).collect();
        let p = ScoreMatrix::new(r, c, data.clone()).unwrap();
        let mask_a = PatchMask::from_vec(CoarseGrid::new(1, r), (0..r).map(|i| keep_bits >> i & 1 == 1).collect()).unwrap();
        let mask_b = PatchMask::from_vec(CoarseGrid::new(1, c), (0..c).map(|j| keep_bits >> (j + 8) & 1 == 1).collect()).unwrap();
        let m = select_coarse(&p, theta, &mask_a, &mask_b).unwrap();
        let mut rows = std::collections::HashSet::new();
        let mut cols = std::collections::HashSet::new();
        for x in &m {
            prop_assert!(rows.insert(x.i) && cols.insert(x.j));
            prop_assert!(mask_a.get(x.i) && mask_b.get(x.j));
            let v = data[x.i * c + x.j];
            prop_assert!(v > theta);
            prop_assert!((0..c).all(|j| data[x.i * c + j] <= v));
            prop_assert!((0..r).all(|i| data[i * c + x.j] <= v));
        }
    }

    #[test]
    fn mask_update_never_revives(scores in prop::collection::vec(0.0..1.0f64, 12), theta in 0.0..1.0f64, prev_bits in any::<u16>()) {
        let grid = CoarseGrid::new(3, 4);
        let prev = PatchMask::from_vec(grid, (0..12).map(|i| prev_bits >> i & 1 == 1).collect()).unwrap();
        let next = update_mask(&scores, theta, &prev).unwrap();
        prop_assert!(next.is_subset_of(&prev));
        for i in 0..12 {
            prop_assert_eq!(next.get(i), prev.get(i) && scores[i] >= theta);
        }
    }

    #[test]
    fn auc_is_a_monotone_fraction(errors in prop::collection::vec(0.0..20.0f64, 1..30), t in 0.1..15.0f64) {
        let a = auc(&errors, t).unwrap();
        let b = auc(&errors, t * 1.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a);
    }

    #[test]
    fn constant_error_auc_is_linear(e in 0.0..10.0f64, t in 0.1..20.0f64) {
        let expected = ((t - e) / t).max(0.0);
        prop_assert!((auc(&[e; 5], t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn corner_error_is_symmetric(a in near_identity(), b in near_identity()) {
        let ab = corner_error(&a, &b, 64.0, 48.0).unwrap();
        let ba = corner_error(&b, &a, 64.0, 48.0).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(corner_error(&a, &a, 64.0, 48.0).unwrap() < 1e-12);
    }

    #[test]
    fn nmi_is_a_symmetric_fraction((r, c, raw) in matrix(5, 5)) {
        let flat: Vec<f64> = raw.iter().map(|v| v.abs()).collect();
        let total: f64 = flat.iter().sum();
        prop_assume!(total > 0.0);
        let joint = DiscreteJoint::new(r, c, flat.iter().map(|v| v / total).collect()).unwrap();
        let v = normalized_mi(&joint);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - normalized_mi(&joint.transpose())).abs() < 1e-12);
        let rows: Vec<usize> = (0..r).rev().collect();
        let cols: Vec<usize> = (0..c).rev().collect();
        prop_assert!((v - normalized_mi(&joint.permuted(&rows, &cols).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn six_significant_digits_read_back(mantissa in -1.0..1.0f64, exp in -8i32..9) {
        let x = mantissa * 10f64.powi(exp);
        let s = format_significant(x, 6);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - x).abs() <= 5.0001e-6 * x.abs(), "{} -> {}", x, s);
        let digits = s.trim_start_matches('-').split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).collect::<String>();
        prop_assert!(digits.trim_start_matches('0').len() <= 6, "{}", s);
    }

    #[test]
    fn rope_preserves_norms_and_depends_on_offsets(
        q in prop::collection::vec(-1.0..1.0f64, 16),
        k in prop::collection::vec(-1.0..1.0f64, 16),
        pos in prop::collection::vec(-1.0..1.0f64, 6),
    ) {
        let freqs: Vec<f64> = initial_frequencies(16, 32.0).into_iter().flatten().collect();
        let freqs = tensor(&freqs, &[8, 2]);
        let rot = |x: &[f64], p: [f64; 2]| rotate(&tensor(x, &[1, 16]), &tensor(&p, &[1, 2]), &freqs)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (p, s, shift) = ([pos[0], pos[1]], [pos[2], pos[3]], [pos[4], pos[5]]);
        let rq = rot(&q, p);
        prop_assert!((dot(&rq, &rq) - dot(&q, &q)).abs() < 1e-12);
        let base = dot(&rq, &rot(&k, s));
        let moved = dot(&rot(&q, [p[0] + shift[0], p[1] + shift[1]]), &rot(&k, [s[0] + shift[0], s[1] + shift[1]]));
        prop_assert!((base - moved).abs() < 1e-10);
    }
}
