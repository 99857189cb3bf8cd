mod common;

use leank::analysis::{self, Budget};
use leank::cache::memory_report;
use leank::mask::{top_s_r, ChannelDims, ScalingFactors};
use leank::model::ToyTransformer;
use leank::tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
}

fn dims_strategy() -> impl Strategy<Value = ChannelDims> {
    (1..3usize, 1..4usize, prop::sample::select(vec![2usize, 4, 8, 12, 16])).prop_map(|(l, h, d)| ChannelDims {
        n_layers: l,
        n_kv_heads: h,
        head_dim: d,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pearson_symmetric_and_affine_invariant(
        a in prop::collection::vec(-5.0..5.0f64, 8..40),
        scale in 0.1..10.0f64,
        shift in -10.0..10.0f64,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.1).collect();
        let ab = analysis::pearson(&a, &b).unwrap();
        let ba = analysis::pearson(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        let a2: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
        let ab2 = analysis::pearson(&a2, &b).unwrap();
        prop_assert!((ab - ab2).abs() < 1e-9, "{ab} vs {ab2}");
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn norm_ratios_bounded_below(q in matrix(6, 8), k in matrix(10, 8)) {
        let qt = Tensor::new(vec![6, 8], q.clone()).unwrap();
        let kt = Tensor::new(vec![10, 8], k.clone()).unwrap();
        let (r, degenerate) = analysis::norm_ratios_qk(&qt, &kt).unwrap();
        prop_assume!(!degenerate);
        // triangle inequality over the rank-one terms
        prop_assert!(r.iter().sum::<f64>() >= 1.0 - 1e-12);
        // Cauchy-Schwarz: ||Q K^T|| <= ||Q|| ||K||
        let fq = common::frob(&q);
        let fk = common::frob(&k);
        for (i, ri) in r.iter().enumerate() {
            let qi = (0..6).map(|a| q[a * 8 + i].powi(2)).sum::<f64>().sqrt();
            let ki = (0..10).map(|a| k[a * 8 + i].powi(2)).sum::<f64>().sqrt();
            prop_assert!(*ri >= qi * ki / (fq * fk) - 1e-12);
        }
    }

    #[test]
    fn freq_profile_conserves_mean(dims in dims_strategy(), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let values: Vec<f64> = (0..dims.total()).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let p = analysis::freq_profile(dims, &values).unwrap();
        prop_assert_eq!(p.len(), dims.head_dim / 2);
        let mean_p = p.iter().sum::<f64>() / p.len() as f64;
        let mean_v = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((mean_p - mean_v).abs() < 1e-12);
    }

    #[test]
    fn top_s_r_counts(dims in dims_strategy(), keep in 0.0..=1.0f64, r_pow in 0..3u32, seed in any::<u64>()) {
        let r = 1usize << r_pow;
        prop_assume!(dims.head_dim % r == 0);
        let mut rng = common::rng(seed);
        let values: Vec<f64> = (0..dims.total()).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let alpha = ScalingFactors::from_tensor(Tensor::new(dims.shape().to_vec(), values).unwrap()).unwrap();
        let beta = top_s_r(&alpha, keep, r).unwrap();
        for l in 0..dims.n_layers {
            for h in 0..dims.n_kv_heads {
                let n = beta.head_count(l, h);
                prop_assert_eq!(n % r, 0);
                prop_assert!(n <= dims.head_dim);
            }
        }
        let k = (keep * dims.total() as f64 + 0.5).floor() as usize;
        // per-head rounding moves each head by less than r
        prop_assert!(beta.kept().abs_diff(k) <= dims.n_heads() * r);
    }

    #[test]
    fn memory_reduction_monotone_in_seq(seed in any::<u64>(), seq in 0..2000usize) {
        let mut rng = common::rng(seed);
        let dims = ChannelDims { n_layers: 2, n_kv_heads: 2, head_dim: 8 };
        let beta = common::random_mask(&mut rng, dims, 2, &[]);
        let a = memory_report(&beta, 4, 16, seq, 2);
        let b = memory_report(&beta, 4, 16, seq + 100, 2);
        prop_assert!(b.k_reduction_fraction >= a.k_reduction_fraction - 1e-15);
        prop_assert!(a.elements_k_pruned <= a.elements_k_baseline);
        let (kb, kp, vb, vp) = common::memory_oracle(&beta, 4, 16, seq);
        prop_assert_eq!((a.elements_k_baseline, a.elements_k_pruned), (kb, kp));
        prop_assert_eq!((a.elements_v_baseline, a.elements_v_pruned), (vb, vp));
    }
}

#[test]
fn uniform_dynamic_budget_is_equal_per_head() {
    let mut rng = common::rng(3);
    let cfg = common::small_config(2, 4, 2, 8);
    let model = ToyTransformer::init(cfg.clone(), 11).unwrap();
    for keep in [0.0, 0.25, 0.3, 0.5, 1.0] {
        let tokens = common::random_tokens(&mut rng, 30, cfg.vocab);
        let m = analysis::dynamic_norm_mask(&model, &tokens, &Budget::Uniform(keep), 4).unwrap();
        let want = ((keep * 8.0 + 0.5).floor() as usize).min(8);
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(m.head_count(l, h), want, "keep {keep}");
            }
        }
    }
    let scores = vec![1.0; 2 * 2 * 8];
    let dims = ChannelDims::of(&cfg);
    assert!(analysis::mask_from_head_budgets(dims, &scores, &[9, 0, 0, 0], 0.1).is_err());
    assert!(analysis::dynamic_norm_mask(&model, &[1, 2, 3], &Budget::Uniform(1.5), 2).is_err());
}
