mod common;

use std::collections::HashMap;

use common::median;
use metavgan::datasets::{make_synthetic, ClassId, DatasetBundle, SyntheticBenchSpec};
use metavgan::genmodel::{HiddenWidths, ModelConfig, ModelParams};
use metavgan::neural::{Matrix, Rng};
use metavgan::zsleval::{
    evaluate_gzsl, evaluate_zsl, harmonic_mean, per_class_accuracy, synthesize_dataset, ClassifierConfig, EvalConfig,
    LabelledSet, OracleGenerator, SoftmaxClassifier, TrainedGenerator,
};
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

fn ids(names: &[&str]) -> Vec<ClassId> {
    names.iter().map(|&n| ClassId::from(n)).collect()
}

fn default_bench(seed: u64) -> (DatasetBundle, metavgan::datasets::ClassMeans) {
    make_synthetic(&SyntheticBenchSpec {
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn synthesized_rows_per_class() {
    let (b, means) = default_bench(0);
    let oracle = OracleGenerator { means: &means, std: 0.5 };
    let one = synthesize_dataset(&oracle, &b, &b.unseen_classes[..1], 3, &mut Rng::new(0)).unwrap();
    assert_eq!(one.x.rows(), 3);
    assert!(one.labels.iter().all(|l| *l == b.unseen_classes[0]));

    let all = synthesize_dataset(&oracle, &b, &b.classes, 300, &mut Rng::new(1)).unwrap();
    assert_eq!(all.x.rows(), 12 * 300);
    let again = synthesize_dataset(&oracle, &b, &b.classes, 300, &mut Rng::new(1)).unwrap();
    assert_eq!(all, again);
    assert!(synthesize_dataset(&oracle, &b, &ids(&["nope"]), 3, &mut Rng::new(0)).is_err());
    assert!(synthesize_dataset(&oracle, &b, &b.classes, 0, &mut Rng::new(0)).is_err());
}

fn two_clusters() -> LabelledSet {
    let mut rng = Rng::new(4);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let (cx, name) = if i % 2 == 0 { (-2.0, "left") } else { (2.0, "right") };
        rows.push(vec![cx + 0.3 * rng.normal(), 0.3 * rng.normal()]);
        labels.push(ClassId::from(name));
    }
    LabelledSet {
        x: Matrix::from_rows(&rows).unwrap(),
        labels,
    }
}

#[test]
fn separable_clusters_reach_full_training_accuracy() {
    let data = two_clusters();
    let classes = ids(&["left", "right"]);
    let cfg = ClassifierConfig {
        epochs: 200,
        ..Default::default()
    };
    let clf = SoftmaxClassifier::train(&data, &classes, &cfg, &mut Rng::new(0)).unwrap();
    let r = per_class_accuracy(&data.labels, &clf.predict(&data.x).unwrap(), &classes).unwrap();
    assert_eq!(r.mean, 1.0);
}

#[test]
fn single_class_classifier_is_rejected() {
    let data = two_clusters();
    assert!(SoftmaxClassifier::train(&data, &ids(&["left"]), &ClassifierConfig::default(), &mut Rng::new(0)).is_err());
}

#[test]
fn permuting_class_order_permutes_the_weights() {
    let data = two_clusters();
    let cfg = ClassifierConfig::default();
    let a = SoftmaxClassifier::train(&data, &ids(&["left", "right"]), &cfg, &mut Rng::new(3)).unwrap();
    let b = SoftmaxClassifier::train(&data, &ids(&["right", "left"]), &cfg, &mut Rng::new(3)).unwrap();
    for r in 0..2 {
        for k in 0..2 {
            assert!((a.weights.get(r, k) - b.weights.get(r, 1 - k)).abs() < 1e-12);
        }
    }
    assert!((a.bias[0] - b.bias[1]).abs() < 1e-12);
}

#[test]
fn per_class_mean_is_not_pooled() {
    let mut truth = vec![ClassId::from("small"); 10];
    truth.extend(vec![ClassId::from("big"); 1000]);
    let pred = vec![ClassId::from("small"); 1010];
    let r = per_class_accuracy(&truth, &pred, &ids(&["small", "big"])).unwrap();
    assert_eq!(r.mean, 0.5);
    let perfect = per_class_accuracy(&truth, &truth, &ids(&["small", "big"])).unwrap();
    assert_eq!(perfect.mean, 1.0);
    assert!(per_class_accuracy(&truth, &pred, &[]).is_err());
    assert!(per_class_accuracy(&truth, &pred, &ids(&["small"])).is_err());
}

#[test]
fn matches_a_brute_force_recount() {
    let classes = ids(&["a", "b", "c", "d", "e"]);
    let mut rng = Rng::new(50);
    let truth: Vec<ClassId> = (0..50).map(|_| classes[rng.below(4)].clone()).collect();
    let pred: Vec<ClassId> = (0..50).map(|_| classes[rng.below(5)].clone()).collect();
    let r = per_class_accuracy(&truth, &pred, &classes).unwrap();
    let mut sum = 0.0;
    let mut present = 0;
    for c in &classes {
        let rows: Vec<usize> = (0..50).filter(|&i| truth[i] == *c).collect();
        if rows.is_empty() {
            continue;
        }
        present += 1;
        sum += rows.iter().filter(|&&i| pred[i] == *c).count() as f64 / rows.len() as f64;
    }
    assert_eq!(r.mean, sum / present as f64);
    assert_eq!(r.excluded, ids(&["e"]));
}

proptest! {
    #[test]
    fn accuracy_ignores_relabeling_and_duplication(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
    ) {
        let names = ids(&["w", "x", "y", "z"]);
        let renamed = ids(&["p", "q", "r", "s"]);
        let truth: Vec<ClassId> = pairs.iter().map(|p| names[p.0].clone()).collect();
        let pred: Vec<ClassId> = pairs.iter().map(|p| names[p.1].clone()).collect();
        let base = per_class_accuracy(&truth, &pred, &names).unwrap().mean;

        let map: HashMap<&ClassId, &ClassId> = names.iter().zip(&renamed).collect();
        let t2: Vec<ClassId> = truth.iter().map(|c| map[c].clone()).collect();
        let p2: Vec<ClassId> = pred.iter().map(|c| map[c].clone()).collect();
        prop_assert_eq!(per_class_accuracy(&t2, &p2, &renamed).unwrap().mean, base);

        let t3: Vec<ClassId> = truth.iter().chain(&truth).cloned().collect();
        let p3: Vec<ClassId> = pred.iter().chain(&pred).cloned().collect();
        prop_assert!((per_class_accuracy(&t3, &p3, &names).unwrap().mean - base).abs() < 1e-15);
    }

    #[test]
    fn harmonic_mean_bounds(s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        let h = harmonic_mean(u, s);
        prop_assert!(h <= 0.5 * (s + u) + 1e-15);
        prop_assert!(h <= 2.0 * s.min(u) + 1e-15);
        prop_assert!((0.0..=1.0).contains(&h));
    }
}

#[test]
fn oracle_generator_matches_nearest_mean() {
    for seed in 0..3 {
        let (b, means) = default_bench(seed);
        let oracle = OracleGenerator { means: &means, std: 0.0 };
        let acc = evaluate_zsl(&b, &oracle, &EvalConfig::default(), seed).unwrap().mean;
        let nm = means.nearest_mean_accuracy(&b, &b.unseen_test_rows, &b.unseen_classes);
        assert!((acc - nm).abs() <= 0.02, "seed {seed}: softmax {acc} vs nearest mean {nm}");
    }
}

fn compact_model() -> ModelConfig {
    let hidden = HiddenWidths {
        encoder: vec![64, 32],
        decoder: vec![64],
        discriminator: vec![64, 32],
    };
    ModelConfig::new(64, 16, 8, &hidden, 0.3).unwrap()
}

#[test]
fn untrained_generator_is_near_chance() {
    let cfg = compact_model();
    let mut accs = Vec::new();
    for seed in 0..10 {
        let (b, _) = default_bench(100 + seed);
        let params = ModelParams::init(&cfg, &mut Rng::new(seed));
        let g = TrainedGenerator { cfg: &cfg, params: &params };
        accs.push(evaluate_zsl(&b, &g, &EvalConfig::default(), seed).unwrap().mean);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let chance = 0.25;
    assert!((mean - chance).abs() <= 3.0 * sd / n.sqrt(), "mean {mean} sd {sd} accs {accs:?}");
    assert!(median(&mut accs) < 0.6);
}

#[test]
fn predictions_stay_in_the_unseen_label_space() {
    let (b, means) = default_bench(1);
    let oracle = OracleGenerator { means: &means, std: 0.5 };
    let train = synthesize_dataset(&oracle, &b, &b.unseen_classes, 50, &mut Rng::new(0)).unwrap();
    let clf = SoftmaxClassifier::train(&train, &b.unseen_classes, &ClassifierConfig::default(), &mut Rng::new(0)).unwrap();
    let all = b.features.clone();
    assert!(clf.predict(&all).unwrap().iter().all(|p| b.unseen_classes.contains(p)));
}

#[test]
fn single_unseen_class_scores_one() {
    let (b, means) = make_synthetic(&SyntheticBenchSpec {
        n_unseen: 1,
        ..Default::default()
    })
    .unwrap();
    let oracle = OracleGenerator { means: &means, std: 0.5 };
    assert_eq!(evaluate_zsl(&b, &oracle, &EvalConfig::default(), 0).unwrap().mean, 1.0);
}

#[test]
fn evaluations_are_deterministic_and_consistent() {
    let (b, means) = default_bench(2);
    let oracle = OracleGenerator { means: &means, std: 0.5 };
    let cfg = EvalConfig {
        per_class: 100,
        ..Default::default()
    };
    assert_eq!(evaluate_zsl(&b, &oracle, &cfg, 5).unwrap(), evaluate_zsl(&b, &oracle, &cfg, 5).unwrap());
    let g = evaluate_gzsl(&b, &oracle, &cfg, 5).unwrap();
    assert_eq!(g, evaluate_gzsl(&b, &oracle, &cfg, 5).unwrap());
    assert_eq!(g.harmonic, harmonic_mean(g.unseen.mean, g.seen.mean));
    assert_eq!(g.seen.per_class.len(), 8);
    assert_eq!(g.unseen.per_class.len(), 4);
    assert!(g.seen.mean > 0.9 && g.unseen.mean > 0.9);
}
