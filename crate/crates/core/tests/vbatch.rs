//! Virtual batch and traversal plan properties.

use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use tl_core::vbatch::{
    build_global_index, collect_index_ranges, generate_traversal_plan, plan_epoch, IndexRangeReport, TraversalPlan,
    VirtualBatch,
};

fn reports(sizes: &[usize]) -> Vec<IndexRangeReport> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &c)| IndexRangeReport {
            node_id: i as u32 * 3 + 1,
            sample_count: c,
        })
        .collect()
}

fn check_plan(batches: &[VirtualBatch], plan: &TraversalPlan, map: &tl_core::vbatch::GlobalIndexMap) {
    assert_eq!(batches.len(), plan.batches.len());
    for (b, p) in batches.iter().zip(&plan.batches) {
        assert_eq!(b.batch_id, p.batch_id);
        assert_eq!(p.batch_size, b.len());
        let mut positions: Vec<usize> = p.steps.iter().flat_map(|s| s.positions.iter().copied()).collect();
        positions.sort_unstable();
        assert_eq!(positions, (0..b.len()).collect::<Vec<_>>());
        let nodes: HashSet<u32> = p.steps.iter().map(|s| s.node_id).collect();
        assert_eq!(nodes.len(), p.steps.len(), "a node is visited twice in one batch");
        for s in &p.steps {
            assert_eq!(s.local_indices.len(), s.positions.len());
            for (&l, &pos) in s.local_indices.iter().zip(&s.positions) {
                assert_eq!(map.resolve(b.global_ids[pos]), Some((s.node_id, l)));
            }
        }
        // Visit order follows first occurrence in the batch.
        let mut order = Vec::new();
        for &g in &b.global_ids {
            let node = map.resolve(g).unwrap().0;
            if !order.contains(&node) {
                order.push(node);
            }
        }
        assert_eq!(order, p.steps.iter().map(|s| s.node_id).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn epoch_covers_every_sample_once(
        sizes in prop::collection::vec(1usize..40, 1..=8),
        batch_size in 1usize..50,
        seed in any::<u64>(),
        epoch in 0usize..5,
        randomize in any::<bool>(),
    ) {
        let r = collect_index_ranges(reports(&sizes)).unwrap();
        let map = build_global_index(&r, randomize, seed);
        let total: usize = sizes.iter().sum();
        prop_assert_eq!(map.total(), total);
        let (batches, plan) = plan_epoch(&map, batch_size, seed, epoch).unwrap();
        let mut seen = BTreeSet::new();
        for s in plan.batches.iter().flat_map(|b| &b.steps) {
            for &l in &s.local_indices {
                prop_assert!(seen.insert((s.node_id, l)));
            }
        }
        let expected: BTreeSet<(u32, usize)> = r
            .iter()
            .flat_map(|x| (0..x.sample_count).map(move |l| (x.node_id, l)))
            .collect();
        prop_assert_eq!(seen, expected);
        prop_assert_eq!(batches.len(), total.div_ceil(batch_size));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == batch_size));
        check_plan(&batches, &plan, &map);
        prop_assert_eq!(plan_epoch(&map, batch_size, seed, epoch).unwrap(), (batches, plan));
    }

    #[test]
    fn global_index_is_a_bijection(
        sizes in prop::collection::vec(1usize..30, 1..=8),
        seed in any::<u64>(),
        randomize in any::<bool>(),
    ) {
        let r = collect_index_ranges(reports(&sizes)).unwrap();
        let map = build_global_index(&r, randomize, seed);
        for g in 0..map.total() {
            let (n, l) = map.resolve(g).unwrap();
            prop_assert_eq!(map.global_id(n, l), Some(g));
        }
        prop_assert_eq!(map.resolve(map.total()), None);
        if !randomize {
            let mut g = 0;
            for x in &r {
                for l in 0..x.sample_count {
                    prop_assert_eq!(map.resolve(g), Some((x.node_id, l)));
                    g += 1;
                }
            }
        }
    }
}

#[test]
fn hundred_seeds_exhaustive() {
    for seed in 0..100u64 {
        let nodes = 1 + (seed as usize * 7) % 8;
        let sizes: Vec<usize> = (0..nodes).map(|i| 1 + (seed as usize * 13 + i * 29) % 37).collect();
        let r = collect_index_ranges(reports(&sizes)).unwrap();
        let map = build_global_index(&r, seed % 2 == 1, seed);
        let bs = 1 + seed as usize % 17;
        let (batches, plan) = plan_epoch(&map, bs, seed, 0).unwrap();
        check_plan(&batches, &plan, &map);
        let covered: usize = plan.batches.iter().flat_map(|b| &b.steps).map(|s| s.local_indices.len()).sum();
        assert_eq!(covered, sizes.iter().sum::<usize>());
        assert_eq!(plan_epoch(&map, bs, seed, 0).unwrap().1, plan);
    }
}

#[test]
fn epochs_reshuffle() {
    let r = collect_index_ranges(reports(&[50, 50])).unwrap();
    let map = build_global_index(&r, false, 0);
    let (a, _) = plan_epoch(&map, 10, 3, 0).unwrap();
    let (b, _) = plan_epoch(&map, 10, 3, 1).unwrap();
    assert_ne!(a, b);
}

#[test]
fn plan_rejects_ids_outside_the_map() {
    let r = collect_index_ranges(reports(&[2])).unwrap();
    let map = build_global_index(&r, false, 0);
    let batch = VirtualBatch { batch_id: 0, global_ids: vec![0, 5] };
    assert!(generate_traversal_plan(&[batch], &map).is_err());
}

#[test]
fn plan_stats_count_steps() {
    let r = collect_index_ranges(reports(&[3, 3])).unwrap();
    let map = build_global_index(&r, false, 0);
    let (_, plan) = plan_epoch(&map, 6, 1, 0).unwrap();
    let s = plan.stats();
    assert_eq!(s.batches, 1);
    assert_eq!(s.steps, 2);
    assert_eq!(s.max_nodes_per_batch, 2);
}
