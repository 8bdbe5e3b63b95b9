use std::collections::BTreeSet;

use metavgan::datasets::{ClassId, DatasetBundle};
use metavgan::episodes::{
    sample_task_batch, subsample_fewshot, ClassPool, DisjointSplit, EpisodeConfig, Shots, SplitStrategy, StandardSplit,
};
use metavgan::neural::{Matrix, Rng};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
use tempfile::tempdir;

/// `n_seen` seen classes with `per_class` rows each (one held out for
/// testing) plus one unseen class with two rows.
fn bundle(n_seen: usize, per_class: usize) -> DatasetBundle {
    let mut classes: Vec<ClassId> = (0..n_seen).map(|i| ClassId::new(format!("s{i:03}"))).collect();
    let unseen = ClassId::from("u0");
    classes.push(unseen.clone());
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut seen_test = Vec::new();
    for (i, c) in classes.iter().enumerate() {
        let n = if i < n_seen { per_class } else { 2 };
        for k in 0..n {
            if i < n_seen && k == 0 {
                seen_test.push(labels.len());
            }
            labels.push(c.clone());
            rows.push(vec![i as f64, k as f64]);
        }
    }
    let unseen_rows: Vec<usize> = (labels.len() - 2..labels.len()).collect();
    let attrs: Vec<Vec<f64>> = (0..classes.len()).map(|i| vec![i as f64]).collect();
    DatasetBundle::new(
        "episodes",
        Matrix::from_rows(&rows).unwrap(),
        labels,
        classes.clone(),
        Matrix::from_rows(&attrs).unwrap(),
        classes[..n_seen].to_vec(),
        vec![unseen],
        seen_test,
        unseen_rows,
    )
    .unwrap()
}

#[test]
fn cub_sized_pool_holds_five_per_class() {
    let b = bundle(150, 12);
    let pool = subsample_fewshot(&b, Shots::Count(5), 0).unwrap();
    assert_eq!(pool.len(), 150);
    assert_eq!(pool.total_examples(), 750);
    let test: BTreeSet<usize> = b.seen_test_rows.iter().copied().collect();
    assert!(pool.classes.iter().flat_map(|c| &c.indices).all(|r| !test.contains(r)));
}

#[test]
fn selection_file_reload_is_idempotent() {
    let b = bundle(12, 9);
    let pool = subsample_fewshot(&b, Shots::Count(5), 4).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("selection.txt");
    pool.save_selection(&path).unwrap();
    let again = ClassPool::load_selection(&b, &path).unwrap();
    assert_eq!(again, pool);
    let path2 = dir.path().join("again.txt");
    again.save_selection(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn tasks_in_a_batch_may_share_classes() {
    let b = bundle(20, 9);
    let pool = subsample_fewshot(&b, Shots::Count(5), 1).unwrap();
    let cfg = EpisodeConfig {
        n_way_tr: 5,
        k_shot_tr: 5,
        n_way_v: 5,
        k_shot_v: 3,
    };
    let mut rng = Rng::new(8);
    let mut shared = 0;
    for _ in 0..100 {
        let batch = sample_task_batch(&pool, &cfg, &mut rng, &DisjointSplit, 4).unwrap();
        let first = batch[0].support_classes();
        shared += batch[1..]
            .iter()
            .filter(|t| !first.is_disjoint(&t.support_classes()))
            .count();
    }
    assert!(shared > 0);
}

#[test]
fn default_config_needs_twenty_classes() {
    let b = bundle(19, 9);
    let pool = subsample_fewshot(&b, Shots::Count(5), 1).unwrap();
    assert!(DisjointSplit
        .sample(&pool, &EpisodeConfig::default(), &mut Rng::new(0))
        .is_err());
}

proptest! {
    #[test]
    fn disjoint_tasks_have_exact_shape(
        n_tr in 1usize..5, k_tr in 1usize..6, n_v in 1usize..5, k_v in 1usize..4, seed in 0u64..1000,
    ) {
        let b = bundle(10, 7);
        let pool = subsample_fewshot(&b, Shots::Count(5), seed).unwrap();
        let cfg = EpisodeConfig { n_way_tr: n_tr, k_shot_tr: k_tr, n_way_v: n_v, k_shot_v: k_v };
        let mut rng = Rng::new(seed);
        let t = DisjointSplit.sample(&pool, &cfg, &mut rng).unwrap();
        prop_assert!(t.support_classes().is_disjoint(&t.query_classes()));
        prop_assert_eq!(t.support.len(), n_tr * k_tr);
        prop_assert_eq!(t.query.len(), n_v * k_v);
        prop_assert_eq!(t.support_classes().len(), n_tr);
        prop_assert_eq!(t.query_classes().len(), n_v);
        let again = DisjointSplit.sample(&pool, &cfg, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(again, t);
    }

    #[test]
    fn standard_queries_stay_in_support(n in 1usize..8, seed in 0u64..1000) {
        let b = bundle(10, 7);
        let pool = subsample_fewshot(&b, Shots::Count(5), seed).unwrap();
        let cfg = EpisodeConfig { n_way_tr: n, k_shot_tr: 2, n_way_v: n, k_shot_v: 2 };
        let t = StandardSplit.sample(&pool, &cfg, &mut Rng::new(seed)).unwrap();
        prop_assert!(t.query_classes().is_subset(&t.support_classes()));
        prop_assert!(!t.example_overlap);
    }
}
