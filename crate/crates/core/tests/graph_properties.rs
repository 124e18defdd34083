use std::collections::BTreeSet;

use hrgnn_core::gat::{gat_forward, gat_pool, gat_project, gat_readout, readout, GatParams};
use hrgnn_core::graph::{edge_weight_values, uniform_edge_weights, QaGraph, RelationGroup, RelationType};
use hrgnn_core::numerics::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn removed_from_mask(mask: u8) -> BTreeSet<RelationGroup> {
    [RelationGroup::Rqq, RelationGroup::Raa, RelationGroup::Rqa]
        .into_iter()
        .enumerate()
        .filter(|(b, _)| mask >> b & 1 == 1)
        .map(|(_, g)| g)
        .collect()
}

fn expected_relation(i: usize, j: usize, q: usize) -> RelationType {
    match (i < q, j < q) {
        (true, true) if i < j => RelationType::QqFwd,
        (true, true) => RelationType::QqOther,
        (true, false) => RelationType::Qa,
        (false, true) => RelationType::Aq,
        (false, false) if i < j => RelationType::AaFwd,
        (false, false) => RelationType::AaOther,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn edges_match_window_brute_force(q in 1usize..7, a in 1usize..9, p in 0usize..12, f in 0usize..12, mask in 0u8..8) {
        let removed = removed_from_mask(mask);
        let g = QaGraph::build(q, a, p, f, &removed).unwrap();
        let n = q + a;
        let mut expected = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let window = (i as i64 - j as i64) <= p as i64 && (j as i64 - i as i64) <= f as i64;
                let rel = expected_relation(i, j, q);
                if window && (i == j || !removed.contains(&rel.group())) {
                    expected.push((i, j, rel));
                }
            }
        }
        let got: Vec<_> = g.edges.iter().map(|e| (e.target, e.source, e.relation)).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn coefficients_average_each_relation(q in 1usize..6, a in 1usize..6, p in 0usize..6, f in 0usize..6, mask in 0u8..8) {
        let g = QaGraph::build(q, a, p, f, &removed_from_mask(mask)).unwrap();
        for rel in RelationType::ALL {
            match g.relation_coefficients(rel) {
                None => prop_assert!(g.edges.iter().all(|e| e.relation != rel || e.is_self_loop())),
                Some(c) => {
                    for i in 0..g.num_vertices() {
                        let row: f64 = (0..g.num_vertices()).map(|j| c.get(i, j)).sum();
                        let has = g.neighbours(i, rel).next().is_some();
                        let expected = if has { 1.0 } else { 0.0 };
                        prop_assert!((row - expected).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn edge_weights_are_row_stochastic(seed in any::<u64>(), q in 1usize..6, a in 1usize..6, p in 0usize..6, f in 0usize..6, mask in 0u8..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = QaGraph::build(q, a, p, f, &removed_from_mask(mask)).unwrap();
        let feats = random_tensor(&mut rng, q + a, 4);
        let w_e = random_tensor(&mut rng, 4, 4);
        let adj = g.adjacency();
        for weights in [edge_weight_values(&feats, &w_e, &g).unwrap(), uniform_edge_weights(&g)] {
            for i in 0..q + a {
                let mut sum = 0.0;
                for j in 0..q + a {
                    prop_assert!(weights.get(i, j) >= 0.0);
                    if adj.get(i, j) == 0.0 {
                        prop_assert_eq!(weights.get(i, j), 0.0);
                    }
                    sum += weights.get(i, j);
                }
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_readout_matches_reference(seed in any::<u64>(), q in 1usize..5, a in 1usize..5, heads in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = QaGraph::build(q, a, 2, 2, &BTreeSet::new()).unwrap();
        let mut store = ParamStore::new();
        let gat = GatParams::register(&mut store, "gat", 5, 5, heads, 0.2, &mut rng);
        let x = random_tensor(&mut rng, q + a, 5);
        let mut tape = Tape::new();
        let bound = gat.bind(&mut tape, &store).unwrap();
        let xv = tape.leaf(x);
        let h = gat_forward(&mut tape, xv, &g.adjacency(), &bound).unwrap();
        let reference = readout(&mut tape, h).unwrap();
        let fused = gat_readout(&mut tape, xv, &g.adjacency(), &bound).unwrap();
        let pooled = gat_pool(&mut tape, xv, &g.adjacency(), &bound).unwrap();
        let split = gat_project(&mut tape, pooled, &bound).unwrap();
        for k in 0..5 {
            let r = tape.value(reference).get(0, k);
            prop_assert!((r - tape.value(fused).get(0, k)).abs() < 1e-12);
            prop_assert!((r - tape.value(split).get(0, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn window_wider_than_graph_is_complete() {
    let g = QaGraph::build(3, 4, 50, 50, &BTreeSet::new()).unwrap();
    assert_eq!(g.edges.len(), 49);
}

#[test]
fn mismatched_feature_count_is_rejected() {
    let g = QaGraph::build(2, 2, 1, 1, &BTreeSet::new()).unwrap();
    assert!(edge_weight_values(&Tensor::zeros(3, 2), &Tensor::zeros(2, 2), &g).is_err());
}
