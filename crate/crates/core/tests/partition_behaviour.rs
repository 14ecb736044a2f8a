mod common;

use std::collections::BTreeMap;

use mfcast::partition::{
    enumerate_patterns, fixed_partition, learn_partition, Artifact, Partition, PartitionConfig, PartitionNode,
    SplitNode, Termination, UncertaintySet, UncertaintySubset,
};
use mfcast::training::TrainData;
use mfcast::{MissingPattern, ModelParams, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn leaf(id: usize, fixed: &[(usize, u8)], params: &ModelParams) -> UncertaintySubset {
    let fixed: BTreeMap<usize, u8> = fixed.iter().copied().collect();
    let missing: Vec<usize> = fixed.iter().filter(|(_, v)| **v == 1).map(|(j, _)| *j).collect();
    UncertaintySubset {
        id,
        alpha_opt: MissingPattern::from_indices(3, &missing),
        free: (0..3).filter(|j| !fixed.contains_key(j)).collect(),
        fixed,
        theta_opt: params.clone(),
        theta_adv: params.clone(),
        lb: 1.0,
        ub: 2.0,
        relgap: 1.0,
    }
}

/// Three maskable features, split on the first and then (inside the
/// missing branch) on the second.
fn three_feature_tree() -> Partition {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ds = common::random_dataset(&mut rng, 4, 2);
    // Features 0..3 all maskable; no bias, so build a 3-column model by hand.
    let mut ds3 = ds.clone();
    ds3.maskable = vec![0, 1, 2];
    ds3.descriptors[2] = mfcast::dataio::FeatureDescriptor::measurement(2, 0);
    let params = ModelSpec::lr(false).init(&ds3, 0).unwrap();
    let node = |subset, parent, split| PartitionNode { subset, parent, split };
    Partition {
        uncertainty: UncertaintySet::new(3, vec![0, 1, 2], 3).unwrap(),
        config: PartitionConfig { max_subsets: 3, epsilon: 0.0 },
        nodes: vec![
            node(leaf(0, &[], &params), None, Some(SplitNode { feature: 0, available: 1, missing: 2 })),
            node(leaf(1, &[(0, 0)], &params), Some(0), None),
            node(leaf(2, &[(0, 1)], &params), Some(0), Some(SplitNode { feature: 1, available: 3, missing: 4 })),
            node(leaf(3, &[(0, 1), (1, 0)], &params), Some(2), None),
            node(leaf(4, &[(0, 1), (1, 1)], &params), Some(2), None),
        ],
        records: Vec::new(),
        termination: Termination::MaxSubsets,
    }
}

fn pattern(bits: [u8; 3]) -> MissingPattern {
    MissingPattern::from_bits(bits.to_vec()).unwrap()
}

#[test]
fn three_feature_tree_routes_worked_cases() {
    let part = three_feature_tree();
    assert_eq!(part.leaf_ids(), vec![1, 3, 4]);
    assert_eq!(part.locate(&pattern([1, 0, 1])).unwrap(), 3);
    assert_eq!(part.locate(&pattern([1, 1, 0])).unwrap(), 4);
    assert_eq!(part.locate(&pattern([0, 1, 1])).unwrap(), 1);
    assert_eq!(part.locate(&pattern([0, 0, 0])).unwrap(), 1);
    // Every pattern reaches exactly the one leaf whose constraints it meets.
    for a in enumerate_patterns(&part.uncertainty).unwrap() {
        let hits: Vec<usize> = part.leaf_ids().into_iter().filter(|&l| part.subset(l).contains(&a)).collect();
        assert_eq!(hits, vec![part.locate(&a).unwrap()]);
    }
}

#[test]
fn truncated_partition_equals_shallower_learning() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let ds = common::planted_dataset(&mut rng, 200, &[1.1, -0.8, 0.6, 0.4, -0.3], 0.05);
    let (tr, va) = (ds.rows(0, 150), ds.rows(150, 200));
    let data = TrainData::new(&tr, &va).unwrap();
    let u = UncertaintySet::new(6, (0..5).collect(), 2).unwrap();
    let cfg = common::small_cfg(1, 25);
    let spec = ModelSpec::lr(true);
    let learn = |q| learn_partition(data, &u, &PartitionConfig { max_subsets: q, epsilon: 0.0 }, &cfg, &spec).unwrap();
    let deep = learn(6);
    for q in [1, 2, 4] {
        assert_eq!(deep.truncate(q).unwrap(), learn(q), "Q = {q}");
    }
}

#[test]
fn gap_threshold_stops_early_and_bounds_leaf_gaps() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let ds = common::planted_dataset(&mut rng, 200, &[1.0, -0.6, 0.5, 0.3], 0.05);
    let (tr, va) = (ds.rows(0, 150), ds.rows(150, 200));
    let data = TrainData::new(&tr, &va).unwrap();
    let u = UncertaintySet::new(5, (0..4).collect(), 2).unwrap();
    let cfg = common::small_cfg(2, 25);
    let pcfg = PartitionConfig { max_subsets: 50, epsilon: 0.5 };
    let part = learn_partition(data, &u, &pcfg, &cfg, &ModelSpec::lr(false)).unwrap();
    assert!(part.leaf_ids().len() <= pcfg.max_subsets);
    if part.termination == Termination::GapThreshold {
        assert!(part.max_relgap() <= pcfg.epsilon);
    }
    assert_ne!(part.termination, Termination::MaxSubsets);
}

#[test]
fn singleton_leaves_have_negligible_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let ds = common::planted_dataset(&mut rng, 160, &[1.0, -0.7, 0.4], 0.05);
    let (tr, va) = (ds.rows(0, 120), ds.rows(120, 160));
    let data = TrainData::new(&tr, &va).unwrap();
    let u = UncertaintySet::new(4, vec![0, 1, 2], 1).unwrap();
    let part = learn_partition(
        data,
        &u,
        &PartitionConfig { max_subsets: 4, epsilon: 0.0 },
        &common::small_cfg(3, 40),
        &ModelSpec::lr(true),
    )
    .unwrap();
    let singletons: Vec<&UncertaintySubset> = part.leaves().filter(|s| s.is_singleton(1)).collect();
    assert!(!singletons.is_empty());
    for s in singletons {
        assert!(s.relgap.abs() <= 0.01, "subset {} gap {}", s.id, s.relgap);
        // A singleton only ever sees its own pattern, so it deploys the optimistic model.
        assert!(std::ptr::eq(s.params_for(&s.alpha_opt), &s.theta_opt));
    }
}

#[test]
fn fixed_partition_routes_by_missing_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let ds = common::planted_dataset(&mut rng, 120, &[1.0, 0.5, -0.5, 0.2], 0.05);
    let (tr, va) = (ds.rows(0, 90), ds.rows(90, 120));
    let data = TrainData::new(&tr, &va).unwrap();
    let u = UncertaintySet::new(5, (0..4).collect(), 2).unwrap();
    let fp = fixed_partition(data, &u, &common::small_cfg(4, 10), &ModelSpec::lr(false)).unwrap();
    assert_eq!(fp.subsets.len(), 3);
    // Every pattern of the set lands in exactly one equality subset.
    let mut counts = [0usize; 3];
    for a in enumerate_patterns(&u).unwrap() {
        let ell = fp.route(&a);
        assert_eq!(ell, a.popcount());
        counts[ell] += 1;
    }
    assert_eq!(counts, [1, 4, 6]);
    // Deployment patterns beyond the budget use the last subset.
    assert_eq!(fp.route(&MissingPattern::from_indices(5, &[0, 1, 2, 3])), 2);
}

#[test]
fn artifact_json_round_trip_preserves_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let ds = common::planted_dataset(&mut rng, 120, &[1.0, -0.5, 0.3], 0.05);
    let (tr, va) = (ds.rows(0, 90), ds.rows(90, 120));
    let data = TrainData::new(&tr, &va).unwrap();
    let u = UncertaintySet::new(4, vec![0, 1, 2], 2).unwrap();
    let cfg = common::small_cfg(5, 15);
    let learned = learn_partition(data, &u, &PartitionConfig { max_subsets: 3, epsilon: 0.0 }, &cfg, &ModelSpec::nn(vec![4], true))
        .unwrap();
    let fixed = fixed_partition(data, &u, &cfg, &ModelSpec::lr(false)).unwrap();
    let single = Artifact::Single { params: learned.subset(0).theta_opt.clone() };
    for art in [Artifact::Learned(learned), Artifact::Fixed(fixed), single] {
        let back = Artifact::from_json(&art.to_json().unwrap()).unwrap();
        assert_eq!(back, art);
        for r in 0..va.n_rows() {
            let a = common::random_pattern(&mut rng, 4, &[0, 1, 2]);
            assert_eq!(back.predict(va.x.row(r), &a).unwrap(), art.predict(va.x.row(r), &a).unwrap());
        }
    }
}
