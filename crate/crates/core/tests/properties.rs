use proptest::prelude::*;

use sffn_core::analysis::{
    expected_overlap_analytical, expected_overlap_closed_form, gate_flops, load_balance_histogram, RoutingEvent,
    RoutingTrace,
};
use sffn_core::memory::{dense_ffn, moe_as_memory, moe_standard, sparse_apply, BlockSelection, Expert, MemoryGeometry, ValueTable};
use sffn_core::rng::RngStream;
use sffn_core::selectors::{
    build_randhash, lorkm_scores, pkm_scores, score_avgk, score_vanilla, select_avgk, select_naive_ann,
    select_randhash, select_vanillam, Aggregator, LowRankKeys, ProductKeys,
};
use sffn_core::tensor::{dot, gelu, matmul, max_rel_err, topk_indices, Matrix};

fn randm(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal(0.0, 1.0))
}

fn randv(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
}

/// `(d, B, g, b)` with `b ≤ B`.
fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=8, 1usize..=8, 1usize..=8).prop_flat_map(|(d, nb, g)| (Just(d), Just(nb), Just(g), 1..=nb))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_matches_triple_loop(seed in any::<u64>(), m in 1usize..=16, k in 1usize..=16, n in 1usize..=16) {
        let mut rng = RngStream::new(seed, "mm", 0);
        let (a, b) = (randm(&mut rng, m, k), randm(&mut rng, k, n));
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                prop_assert!(max_rel_err(&[c.get(i, j)], &[s], 1e-300) <= 1e-12);
            }
        }
        prop_assert_eq!(c, matmul(&a, &b).unwrap());
    }

    #[test]
    fn topk_is_stable_descending_prefix(values in prop::collection::vec(-4i32..4, 1..40), k_frac in 0.0f64..=1.0) {
        // small integer range forces ties
        let scores: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let k = (k_frac * scores.len() as f64) as usize;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut want = order[..k].to_vec();
        want.sort_unstable();
        prop_assert_eq!(topk_indices(&scores, k).unwrap(), want);
    }

    #[test]
    fn moe_equals_memory_view((d, nb, g, _) in geometry(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "eq", 0);
        let experts: Vec<Expert> = (0..nb)
            .map(|_| Expert { keys: randm(&mut rng, g, d), values: randm(&mut rng, g, d) })
            .collect();
        let gates: Vec<f64> = (0..nb).map(|_| rng.uniform(0.0, 1.0)).collect();
        let x = randv(&mut rng, d);
        let a = moe_standard(&x, &experts, &gates).unwrap();
        let b = moe_as_memory(&x, &experts, &gates).unwrap();
        prop_assert!(max_rel_err(&a, &b, 1e-12) <= 1e-10);
    }

    #[test]
    fn full_selection_is_dense_bitwise((d, nb, g, _) in geometry(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "full", 0);
        let geo = MemoryGeometry::new(d, nb * g, g, nb * g).unwrap();
        let keys = randm(&mut rng, nb * g, d);
        let values = ValueTable::new(randm(&mut rng, nb * g, d));
        let x = randv(&mut rng, d);
        let sel = BlockSelection::hard((0..nb).collect()).unwrap();
        prop_assert_eq!(sparse_apply(&x, &keys, &values, &sel, &geo).unwrap(), dense_ffn(&x, &keys, &values).unwrap());
    }

    #[test]
    fn disjoint_selections_add((d, nb, g, _) in geometry(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "add", 0);
        let geo = MemoryGeometry::new(d, nb * g, g, g).unwrap();
        let keys = randm(&mut rng, nb * g, d);
        let values = ValueTable::new(randm(&mut rng, nb * g, d));
        let x = randv(&mut rng, d);
        let split = rng.below(nb + 1);
        let w: Vec<f64> = (0..nb).map(|_| rng.uniform(0.1, 2.0)).collect();
        let part = |r: std::ops::Range<usize>| BlockSelection::soft(r.clone().collect(), w[r].to_vec()).unwrap();
        let y = sparse_apply(&x, &keys, &values, &part(0..nb), &geo).unwrap();
        let y1 = sparse_apply(&x, &keys, &values, &part(0..split), &geo).unwrap();
        let y2 = sparse_apply(&x, &keys, &values, &part(split..nb), &geo).unwrap();
        let sum: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a + b).collect();
        prop_assert!(max_rel_err(&y, &sum, 1e-12) <= 1e-12 * 16.0);
    }

    #[test]
    fn weight_scaling_scales_output((d, nb, g, b) in geometry(), seed in any::<u64>(), e in -4i32..=4) {
        // powers of two keep every product exact
        let c = 2f64.powi(e);
        let mut rng = RngStream::new(seed, "lin", 0);
        let geo = MemoryGeometry::new(d, nb * g, g, b * g).unwrap();
        let keys = randm(&mut rng, nb * g, d);
        let values = ValueTable::new(randm(&mut rng, nb * g, d));
        let x = randv(&mut rng, d);
        let idx = rng.sample_distinct(nb, b);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        let w: Vec<f64> = (0..b).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sel = BlockSelection::soft(sorted, w).unwrap();
        let y = sparse_apply(&x, &keys, &values, &sel, &geo).unwrap();
        let ys = sparse_apply(&x, &keys, &values, &sel.scaled(c), &geo).unwrap();
        let want: Vec<f64> = y.iter().map(|v| v * c).collect();
        prop_assert_eq!(ys, want);
    }

    #[test]
    fn avgk_is_mean_of_dots((d, nb, g, b) in geometry(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "avgk", 0);
        let geo = MemoryGeometry::new(d, nb * g, g, b * g).unwrap();
        let keys = randm(&mut rng, nb * g, d);
        let x = randv(&mut rng, d);
        let s = score_avgk(&x, &keys, &geo).unwrap();
        let oracle: Vec<f64> = (0..nb)
            .map(|i| (0..g).map(|j| dot(&x, keys.row(i * g + j))).sum::<f64>() / g as f64)
            .collect();
        // cancellation can make a score tiny; compare against the row scale
        let scale: Vec<f64> = (0..nb).map(|i| (0..g).map(|j| dot(&x, keys.row(i * g + j)).abs()).sum::<f64>() / g as f64).collect();
        for i in 0..nb {
            prop_assert!((s[i] - oracle[i]).abs() <= 1e-12 * scale[i].max(1e-300) * 4.0);
        }
    }

    #[test]
    fn selectors_return_valid_selections((d, nb, g, b) in geometry(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "valid", 0);
        let geo = MemoryGeometry::new(d, nb * g, g, b * g).unwrap();
        let keys = randm(&mut rng, nb * g, d);
        let x = randv(&mut rng, d);
        for sel in [
            select_vanillam(&x, &keys, &geo, Aggregator::Max).unwrap(),
            select_avgk(&x, &keys, &geo).unwrap(),
        ] {
            prop_assert_eq!(sel.len(), b);
            prop_assert!(sel.check(nb).is_ok());
        }
        let table = build_randhash(20, &geo, seed).unwrap();
        let r = select_randhash(rng.below(20), &table).unwrap();
        prop_assert_eq!(r.len(), b);
        prop_assert!(r.check(nb).is_ok());
    }

    #[test]
    fn naive_ann_without_swaps_is_vanillam(d in 1usize..=8, dm in 2usize..=32, seed in any::<u64>(), kf in 0.0f64..1.0) {
        let k = 1 + (kf * (dm - 1) as f64) as usize;
        let mut rng = RngStream::new(seed, "ann", 0);
        let geo = MemoryGeometry::new(d, dm, 1, k).unwrap();
        let keys = randm(&mut rng, dm, d);
        let x = randv(&mut rng, d);
        let coeffs: Vec<f64> = keys.row_iter().map(|kr| gelu(dot(&x, kr))).collect();
        let ann = select_naive_ann(&coeffs, k, 0.0, &mut rng).unwrap();
        prop_assert_eq!(ann, select_vanillam(&x, &keys, &geo, Aggregator::Avg).unwrap());
    }

    #[test]
    fn overlap_series_is_closed_form(nb in 1usize..=64, bf in 0.0f64..=1.0, g in 1usize..=4096) {
        let b = (bf * nb as f64).round() as usize;
        let s = expected_overlap_analytical(nb, b, g).unwrap();
        let c = expected_overlap_closed_form(nb, b, g);
        prop_assert!((s - c).abs() <= 1e-9 * c.max(1.0));
    }

    #[test]
    fn gate_flops_linear(d in 1usize..2048, nb in 1usize..1024, n in 1usize..32, t in 1u32..1_000_000) {
        let base = gate_flops(d, nb, n, t as f64, 4.0);
        prop_assert_eq!(gate_flops(d, 2 * nb, n, t as f64, 4.0), 2.0 * base);
        prop_assert_eq!(gate_flops(d, nb, 3 * n, t as f64, 4.0), 3.0 * base);
        prop_assert_eq!(gate_flops(d, nb, n, 2.0 * t as f64, 4.0), 2.0 * base);
    }

    #[test]
    fn histogram_sums_to_one(space in 1usize..32, picks in prop::collection::vec(0usize..1000, 1..300)) {
        let events = picks.iter().enumerate().map(|(pos, &p)| RoutingEvent {
            layer: 0, seq: 0, pos, token_id: p, blocks: vec![p % space],
        }).collect();
        let h = load_balance_histogram(&RoutingTrace::new(space, 1, events).unwrap()).unwrap();
        prop_assert!((h.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(h.windows(2).all(|w| w[0] >= w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn factorized_scores_match_materialized(
        (d, half) in (2usize..=8).prop_flat_map(|d| (Just(d), 1..=d / 2)),
        side in 1usize..=5,
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed, "pkm", 0);
        let d_low = 2 * half;
        let pk = ProductKeys::new(randm(&mut rng, d, d_low), randm(&mut rng, side, half), randm(&mut rng, side, half), None).unwrap();
        let x = randv(&mut rng, d);
        let full = pk.materialize();
        let oracle: Vec<f64> = full.row_iter().map(|k| gelu(dot(&x, k))).collect();
        prop_assert!(max_rel_err(&pkm_scores(&x, &pk).unwrap(), &oracle, 1e-12) <= 1e-10);

        let dm = side * side;
        let lr = LowRankKeys::new(randm(&mut rng, d, d_low), randm(&mut rng, dm, d_low), None).unwrap();
        let full = lr.materialize();
        let oracle: Vec<f64> = full.row_iter().map(|k| gelu(dot(&x, k))).collect();
        prop_assert!(max_rel_err(&lorkm_scores(&x, &lr).unwrap(), &oracle, 1e-12) <= 1e-10);
    }

    #[test]
    fn vanilla_unit_blocks_are_gelu_of_keys(d in 1usize..=8, dm in 1usize..=32, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "vg", 0);
        let geo = MemoryGeometry::new(d, dm, 1, 1).unwrap();
        let keys = randm(&mut rng, dm, d);
        let x = randv(&mut rng, d);
        let want: Vec<f64> = keys.row_iter().map(|k| gelu(dot(&x, k))).collect();
        prop_assert_eq!(score_vanilla(&x, &keys, &geo, Aggregator::Avg).unwrap(), want);
    }

    #[test]
    fn randhash_ignores_representation((d, nb, g, b) in geometry(), seed in any::<u64>(), tok in 0usize..50) {
        let geo = MemoryGeometry::new(d, nb * g, g, b * g).unwrap();
        let table = build_randhash(50, &geo, seed).unwrap();
        let again = build_randhash(50, &geo, seed).unwrap();
        prop_assert_eq!(select_randhash(tok, &table).unwrap(), select_randhash(tok, &again).unwrap());
    }
}

#[test]
fn gelu_matches_erf_on_grid() {
    for i in 0..=10_000 {
        let x = -8.0 + 16.0 * i as f64 / 10_000.0;
        let want = 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        assert!((gelu(x) - want).abs() <= 1e-9, "x={x}");
    }
}

#[test]
fn direct_selectors_depend_on_representation() {
    let mut rng = RngStream::new(5, "dep", 0);
    let geo = MemoryGeometry::new(6, 32, 4, 8).unwrap();
    let keys = randm(&mut rng, 32, 6);
    let mut seen_v = std::collections::BTreeSet::new();
    let mut seen_a = std::collections::BTreeSet::new();
    for _ in 0..20 {
        let x = randv(&mut rng, 6);
        seen_v.insert(select_vanillam(&x, &keys, &geo, Aggregator::Avg).unwrap().indices().to_vec());
        seen_a.insert(select_avgk(&x, &keys, &geo).unwrap().indices().to_vec());
    }
    assert!(seen_v.len() > 1 && seen_a.len() > 1);
}
