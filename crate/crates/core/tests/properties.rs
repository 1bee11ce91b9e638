mod common;

use mla_upcycle::attention::{cache_footprint, rope_apply, AttentionGeometry, LayerKind};
use mla_upcycle::tensor::{svd_full, svd_truncated};
use mla_upcycle::training::kl_value;
use mla_upcycle::upcycle::{align_rank, select_rank_dynamic, RANK_ALIGNMENT};
use mla_upcycle::Tensor;
use proptest::prelude::*;

fn spectrum() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..10.0f64], 1..40).prop_filter_map("nonzero", |mut s| {
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        (s[0] > 0.0).then_some(s)
    })
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..9, 1usize..9).prop_flat_map(|(m, n)| {
        prop::collection::vec(-3.0..3.0f64, m * n).prop_map(move |d| Tensor::new(&[m, n], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dynamic_rank_is_the_brute_force_scan(s in spectrum(), delta in 0.001..=1.0f64) {
        prop_assert_eq!(select_rank_dynamic(&s, delta).unwrap(), common::brute_force_rank(&s, delta));
    }

    #[test]
    fn dynamic_rank_is_monotone_in_delta(s in spectrum(), a in 0.001..=1.0f64, b in 0.001..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(select_rank_dynamic(&s, lo).unwrap() <= select_rank_dynamic(&s, hi).unwrap());
    }

    #[test]
    fn aligned_ranks_are_multiples_or_capped(r in 1usize..300, max in 1usize..300) {
        let a = align_rank(r, max);
        prop_assert!(a == max || (a.is_multiple_of(RANK_ALIGNMENT) && a >= r));
        prop_assert!(a <= max);
    }

    #[test]
    fn truncation_error_is_the_tail_energy(a in matrix(), frac in 0.0..1.0f64) {
        let full = svd_full(&a).unwrap();
        let r = ((full.sigma.len() as f64 * frac) as usize).max(1);
        let approx = svd_truncated(&a, r).unwrap().reconstruct();
        let err = common::frob2(&a.sub(&approx).unwrap());
        let tail: f64 = full.sigma[r..].iter().map(|s| s * s).sum();
        let total = common::frob2(&a);
        prop_assert!((err - tail).abs() <= 1e-6 * total.max(1e-300), "err {err} tail {tail}");
    }

    #[test]
    fn singular_values_carry_the_frobenius_norm(a in matrix()) {
        let s = svd_full(&a).unwrap().sigma;
        let energy: f64 = s.iter().map(|x| x * x).sum();
        prop_assert!((energy - common::frob2(&a)).abs() <= 1e-10 * common::frob2(&a).max(1.0));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0..50.0f64, 12), shift in -100.0..100.0f64) {
        let x = Tensor::new(&[3, 4], v).unwrap();
        let p = x.softmax_rows();
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&q| q >= 0.0));
        }
        let shifted = Tensor::from_fn(&[3, 4], |i| x.data()[i] + shift).softmax_rows();
        prop_assert!(p.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(v in prop::collection::vec(-8.0..8.0f64, 10), w in prop::collection::vec(-8.0..8.0f64, 10)) {
        let a = Tensor::new(&[2, 5], v).unwrap();
        let b = Tensor::new(&[2, 5], w).unwrap();
        prop_assert!(kl_value(&a, &b).unwrap() >= 0.0);
        prop_assert!(kl_value(&a, &a).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn rope_preserves_pair_norms(v in prop::collection::vec(-5.0..5.0f64, 16), p in prop::collection::vec(0usize..5000, 2)) {
        let x = Tensor::new(&[2, 8], v).unwrap();
        let y = rope_apply(&x, &p, 2, 10_000.0).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            prop_assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() <= 1e-12);
        }
    }

    #[test]
    fn rope_scores_depend_only_on_offsets(v in prop::collection::vec(-2.0..2.0f64, 8), w in prop::collection::vec(-2.0..2.0f64, 8), m in 0usize..500, n in 0usize..500, s in 0usize..500) {
        let q = Tensor::new(&[1, 8], v).unwrap();
        let k = Tensor::new(&[1, 8], w).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let rot = |t: &Tensor, p: usize| rope_apply(t, &[p], 1, 10_000.0).unwrap();
        let d1 = dot(&rot(&q, m), &rot(&k, n));
        let d2 = dot(&rot(&q, m + s), &rot(&k, n + s));
        prop_assert!((d1 - d2).abs() <= 1e-9);
    }

    #[test]
    fn cache_percent_is_exact(n_kv in 1usize..9, half_dh in 1usize..33, r_kv in 1usize..600, mla in 0usize..17) {
        let d_h = 2 * half_dh;
        let g = AttentionGeometry { d: 4096, n_h: n_kv * 2, n_kv, d_h, d_qk: 2, d_r: 2, r_q: 8, r_kv };
        let kinds: Vec<LayerKind> = (0..16).map(|i| if i < mla { LayerKind::Mla { r_q: 8, r_kv } } else { LayerKind::Attention }).collect();
        let fp = cache_footprint(&g, &kinds, 3);
        let num = (mla * (r_kv + 2) + (16 - mla) * 2 * n_kv * d_h) as u64;
        let den = (16 * 2 * n_kv * d_h) as u64;
        prop_assert_eq!((fp.per_token, fp.baseline_per_token), (num, den));
        let scaled = (num as u128 * 1_000_000 + den as u128 / 2) / den as u128;
        let s = fp.percent_string(4);
        let digits: String = s.chars().filter(|c| c.is_ascii_digit()).collect();
        prop_assert_eq!(digits.parse::<u128>().unwrap(), scaled);
    }
}
