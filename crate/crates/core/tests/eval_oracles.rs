mod common;

use common::oracles::{random_set, reference_jaccard, reference_metrics};
use common::rng;
use proptest::prelude::*;
use rand::Rng;
use tbn::eval::{
    distance_matrix, evaluate, evaluate_sets, k_reciprocal_rerank, pool_multi_query, EmbeddingSet, FeatureMode,
    Protocol, RerankParams,
};

#[test]
fn distances_match_double_loop() {
    let mut r = rng(3);
    for _ in 0..20 {
        let dim = r.random_range(1..40);
        let (qn, gn) = (r.random_range(1..12), r.random_range(1..30));
        let q = random_set(&mut r, qn, dim, 5, 3);
        let g = random_set(&mut r, gn, dim, 5, 3);
        let d = distance_matrix(&q, &g).unwrap();
        for (i, qv) in q.vectors.iter().enumerate() {
            for (j, gv) in g.vectors.iter().enumerate() {
                let mut s = 0.0;
                for k in 0..dim {
                    s += (qv[k] - gv[k]) * (qv[k] - gv[k]);
                }
                assert!((d[i][j] - s).abs() <= 1e-10 * s.max(1.0));
            }
        }
    }
}

#[test]
fn metrics_match_quadratic_reference() {
    let mut r = rng(4);
    for case in 0..60 {
        let q = r.random_range(1..=50);
        let g = r.random_range(1..=200);
        let ids = r.random_range(1..12);
        let cams = r.random_range(1..4);
        let q_ids: Vec<i64> = (0..q).map(|_| r.random_range(-1..ids)).collect();
        let q_cams: Vec<u32> = (0..q).map(|_| r.random_range(1..=cams)).collect();
        let g_ids: Vec<i64> = (0..g).map(|_| r.random_range(-1..ids)).collect();
        let g_cams: Vec<u32> = (0..g).map(|_| r.random_range(1..=cams)).collect();
        // coarse values force ties, which both sides break by gallery index
        let dist: Vec<Vec<f64>> = (0..q)
            .map(|_| (0..g).map(|_| r.random_range(0..20) as f64 / 4.0).collect())
            .collect();
        let got = evaluate(&dist, &q_ids, &q_cams, &g_ids, &g_cams).unwrap();
        let (cmc, map, aps) = reference_metrics(&dist, &q_ids, &q_cams, &g_ids, &g_cams);
        assert_eq!(got.cmc, cmc, "case {case}");
        assert_eq!(got.average_precision, aps, "case {case}");
        assert_eq!(got.map, map, "case {case}");
        assert_eq!(got.num_valid_queries, aps.iter().flatten().count());
        assert_eq!(got.num_valid_queries + got.num_invalid_queries, q);
    }
}

#[test]
fn multi_query_pools_unit_vectors() {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let q = EmbeddingSet {
        vectors: vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0]), unit(vec![1.0, 1.0])],
        identity_ids: vec![3, 3, 4],
        camera_ids: vec![1, 1, 1],
        feature_mode: FeatureMode::Joint,
        paths: vec![],
    };
    let pooled = pool_multi_query(&q);
    assert_eq!(pooled.len(), 2);
    let h = 0.5f64.sqrt();
    for (a, b) in pooled.vectors[0].iter().zip([h, h]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(pooled.identity_ids, vec![3, 4]);
}

#[test]
fn rerank_matches_dense_reference() {
    for seed in 0..40 {
        let mut r = rng(100 + seed);
        let qn = r.random_range(1..4);
        let gn = r.random_range(5..9);
        let q = random_set(&mut r, qn, 3, 3, 2);
        let g = random_set(&mut r, gn, 3, 3, 2);
        for (k1, k2) in [(3, 2), (4, 1), (gn - 1, 3)] {
            let params = RerankParams { k1, k2, lambda: 0.0 };
            let got = k_reciprocal_rerank(&q, &g, &params).unwrap();
            let want = reference_jaccard(&q, &g, k1, k2);
            for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((a - b).abs() <= 1e-10, "seed {seed} k1 {k1} k2 {k2}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn rerank_two_by_five_example() {
    let mut r = rng(9);
    let q = random_set(&mut r, 2, 4, 2, 2);
    let g = random_set(&mut r, 5, 4, 2, 2);
    let got = k_reciprocal_rerank(&q, &g, &RerankParams { k1: 3, k2: 2, lambda: 0.0 }).unwrap();
    let want = reference_jaccard(&q, &g, 3, 2);
    assert_eq!(got.len(), 2);
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((a - b).abs() <= 1e-10);
        assert!((0.0..=1.0).contains(a));
    }
}

#[test]
fn rerank_lambda_endpoints() {
    let mut r = rng(10);
    let q = random_set(&mut r, 4, 6, 4, 2);
    let g = random_set(&mut r, 12, 6, 4, 2);
    let one = k_reciprocal_rerank(&q, &g, &RerankParams { k1: 6, k2: 3, lambda: 1.0 }).unwrap();
    assert_eq!(one, distance_matrix(&q, &g).unwrap());
    let zero = k_reciprocal_rerank(&q, &g, &RerankParams { k1: 6, k2: 3, lambda: 0.0 }).unwrap();
    let half = k_reciprocal_rerank(&q, &g, &RerankParams { k1: 6, k2: 3, lambda: 0.5 }).unwrap();
    for i in 0..4 {
        for j in 0..12 {
            let mid = 0.5 * zero[i][j] + 0.5 * one[i][j];
            assert!((half[i][j] - mid).abs() < 1e-12);
        }
    }
}

#[test]
fn rerank_rejects_bad_parameters() {
    let mut r = rng(11);
    let q = random_set(&mut r, 2, 3, 2, 2);
    let g = random_set(&mut r, 6, 3, 2, 2);
    for (k1, k2, lambda) in [(6, 2, 0.3), (4, 4, 0.3), (4, 0, 0.3), (4, 2, 1.5), (4, 2, -0.1)] {
        let err = k_reciprocal_rerank(&q, &g, &RerankParams { k1, k2, lambda }).unwrap_err();
        assert!(err.is_validation(), "{k1} {k2} {lambda}: {err}");
    }
}

fn scaled(set: &EmbeddingSet, c: f64) -> EmbeddingSet {
    let mut s = set.clone();
    s.vectors.iter_mut().flatten().for_each(|x| *x *= c);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cmc_is_monotone_and_bounded(seed in 0u64..10_000, qn in 1usize..15, gn in 1usize..40) {
        let mut r = rng(seed);
        let q = random_set(&mut r, qn, 5, 4, 3);
        let g = random_set(&mut r, gn, 5, 4, 3);
        let (res, _) = evaluate_sets(&q, &g, Protocol::SingleQuery).unwrap();
        prop_assert_eq!(res.cmc.len(), gn);
        for w in res.cmc.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(res.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
        if res.num_valid_queries > 0 {
            prop_assert_eq!(*res.cmc.last().unwrap(), 1.0);
        }
        prop_assert!((0.0..=1.0).contains(&res.map));
        prop_assert!(res.map <= 1.0);
        prop_assert!(res.average_precision.iter().flatten().all(|ap| *ap > 0.0 && *ap <= 1.0));
        prop_assert_eq!(res.rank1, res.cmc_at(1));
        prop_assert_eq!(res.cmc_at(gn + 10), *res.cmc.last().unwrap());
    }

    #[test]
    fn metrics_invariant_to_power_of_two_scaling(seed in 0u64..10_000, exp in -4i32..5) {
        let mut r = rng(seed);
        let q = random_set(&mut r, 6, 4, 3, 2);
        let g = random_set(&mut r, 20, 4, 3, 2);
        let c = 2f64.powi(exp);
        for protocol in [Protocol::SingleQuery, Protocol::MultiQuery] {
            let (a, _) = evaluate_sets(&q, &g, protocol).unwrap();
            let (b, _) = evaluate_sets(&scaled(&q, c), &scaled(&g, c), protocol).unwrap();
            prop_assert_eq!(&a.rankings, &b.rankings);
            prop_assert_eq!(a.map, b.map);
            prop_assert_eq!(&a.cmc, &b.cmc);
        }
    }

    #[test]
    fn gallery_order_does_not_change_metrics(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let q = random_set(&mut r, 5, 4, 3, 2);
        let g = random_set(&mut r, 15, 4, 3, 2);
        let mut rev = g.clone();
        rev.vectors.reverse();
        rev.identity_ids.reverse();
        rev.camera_ids.reverse();
        let (a, _) = evaluate_sets(&q, &g, Protocol::SingleQuery).unwrap();
        let (b, _) = evaluate_sets(&q, &rev, Protocol::SingleQuery).unwrap();
        prop_assert!((a.map - b.map).abs() < 1e-12);
        prop_assert_eq!(&a.cmc, &b.cmc);
    }
}
