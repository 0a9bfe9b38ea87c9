use approx::assert_relative_eq;
use cfsl::data::SplitSet;
use cfsl::episodic::{
    classify_query, evaluate, mean_and_std, prototypes, run_episode, sample_episodes, EvalParams, EvalReport,
};
use cfsl::{ModelConfig, ModelState, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_set(n_classes: usize, per_class: usize, seed: u64) -> SplitSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SplitSet {
        class_names: (0..n_classes).map(|c| format!("c{c}")).collect(),
        ..SplitSet::default()
    };
    for c in 0..n_classes {
        for _ in 0..per_class {
            let data = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            set.images.push(Tensor::new(vec![8, 8, 3], data).unwrap());
            set.labels.push(c);
        }
    }
    set
}

fn toy_model(seed: u64) -> ModelState {
    ModelState::init(&ModelConfig {
        widths: vec![4, 8],
        n_classes: 3,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Softmax of cosine similarities, written directly.
fn oracle_probs(q: &[f64], protos: &[Vec<f64>]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let sims: Vec<f64> = protos.iter().map(|p| dot(q, p) / (dot(q, q).sqrt() * dot(p, p).sqrt())).collect();
    let z: f64 = sims.iter().map(|s| s.exp()).sum();
    sims.iter().map(|s| s.exp() / z).collect()
}

#[test]
fn prototypes_are_support_means() {
    let a = [1.0, 2.0, 3.0];
    let b = [3.0, 0.0, -1.0];
    let c = [0.5, 0.5, 0.5];
    let p = prototypes(&[vec![&a[..], &b[..]], vec![&c[..]]]).unwrap();
    assert_eq!(p[0], vec![2.0, 1.0, 1.0]);
    assert_eq!(p[1], c.to_vec());
    assert!(prototypes(&[vec![]]).is_err());
}

#[test]
fn classification_matches_softmax_of_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..2.0)).collect();
        let protos: Vec<Vec<f64>> = (0..5).map(|_| (0..16).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
        let p = classify_query(&q, &protos).unwrap();
        for (a, e) in p.iter().zip(oracle_probs(&q, &protos)) {
            assert_relative_eq!(*a, e, epsilon = 1e-14);
        }
    }
}

#[test]
fn constant_features_give_uniform_probabilities() {
    let q = vec![1.0; 8];
    let protos = vec![vec![2.0; 8]; 5];
    for p in classify_query(&q, &protos).unwrap() {
        assert_relative_eq!(p, 0.2, epsilon = 1e-15);
    }
}

#[test]
fn degenerate_features_are_rejected() {
    assert!(classify_query(&[0.0; 4], &[vec![1.0; 4]]).is_err());
    assert!(classify_query(&[1.0; 4], &[vec![0.0; 4], vec![0.0; 4]]).is_err());
    assert!(classify_query(&[1.0; 4], &[]).is_err());
    assert!(classify_query(&[1.0; 4], &[vec![1.0; 3]]).is_err());
    let p = classify_query(&[1.0, 0.0], &[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    assert!(p[1] > p[0]);
}

#[test]
fn report_matches_arithmetic_oracle() {
    let accs: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
    let r = EvalReport::from_accuracies(&EvalParams::default(), accs.clone());
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let sd = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((r.mean_accuracy - mean).abs() < 1e-12);
    assert!((r.ci95 - 1.96 * sd / n.sqrt()).abs() < 1e-12);
    assert_eq!(mean_and_std(&[0.5]), (0.5, 0.0));
    let csv = r.to_csv();
    assert!(csv.starts_with("episode,accuracy\n0,"));
    assert_eq!(csv.lines().count(), 39);
    assert!(csv.ends_with(&format!("mean,{}\n", r.mean_accuracy)));
}

#[test]
fn sampled_episodes_are_well_formed() {
    let set = toy_set(7, 6, 0);
    let params = EvalParams { k: 4, n: 2, q: 3, n_episodes: 50, seed: 9 };
    for ep in sample_episodes(&set, &params).unwrap() {
        let mut classes = ep.classes.clone();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes.len(), 4);
        let mut all = Vec::new();
        for (c, (s, q)) in ep.classes.iter().zip(ep.support.iter().zip(&ep.queries)) {
            assert_eq!((s.len(), q.len()), (2, 3));
            for &i in s.iter().chain(q) {
                assert_eq!(set.labels[i], *c);
                all.push(i);
            }
        }
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}

#[test]
fn sampling_rejects_impossible_episodes() {
    let set = toy_set(3, 4, 0);
    assert!(sample_episodes(&set, &EvalParams { k: 4, n: 1, q: 1, n_episodes: 1, seed: 0 }).is_err());
    assert!(sample_episodes(&set, &EvalParams { k: 3, n: 2, q: 3, n_episodes: 1, seed: 0 }).is_err());
    assert!(sample_episodes(&SplitSet::default(), &EvalParams::default()).is_err());
}

#[test]
fn evaluation_is_deterministic_and_k_can_cover_every_class() {
    let set = toy_set(5, 4, 1);
    let model = toy_model(0);
    let params = EvalParams { k: 5, n: 1, q: 3, n_episodes: 20, seed: 4 };
    let a = evaluate(&set, &model, &params).unwrap();
    let b = evaluate(&set, &model, &params).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.per_episode_accuracies.len(), 20);
    let c = evaluate(&set, &model, &EvalParams { seed: 5, ..params }).unwrap();
    assert_ne!(a.per_episode_accuracies, c.per_episode_accuracies);
}

#[test]
fn episodes_are_invariant_to_feature_scale() {
    let set = toy_set(5, 4, 2);
    let params = EvalParams { k: 3, n: 1, q: 3, n_episodes: 10, seed: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feats: Vec<Vec<f64>> = (0..set.len()).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let scaled: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|v| v * 37.5).collect()).collect();
    for ep in sample_episodes(&set, &params).unwrap() {
        let a = run_episode(&ep, &feats).unwrap();
        let b = run_episode(&ep, &scaled).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        for (pa, pb) in a.probabilities.iter().flatten().zip(b.probabilities.iter().flatten()) {
            assert_relative_eq!(*pa, *pb, epsilon = 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn probabilities_sum_to_one(
        q in prop::collection::vec(0.01f64..10.0, 8),
        protos in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 8), 1..10),
    ) {
        prop_assume!(protos.iter().any(|p| p.iter().any(|v| *v > 0.0)));
        let p = classify_query(&q, &protos).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
