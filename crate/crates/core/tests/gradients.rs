use cfsl::gradcheck::{check_gradient, check_objective_term};
use cfsl::losses::{LossWeights, ObjectiveBatch, ObjectiveTerm};
use cfsl::{Graph, ModelConfig, ModelState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn instance(seed: u64) -> (ModelState, Vec<Tensor>, Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelState::init(&ModelConfig {
        widths: vec![3, 4],
        n_classes: 3,
        n_perms: 4,
        seed,
        ..ModelConfig::default()
    })
    .unwrap();
    let images: Vec<Tensor> = (0..2)
        .map(|_| random_tensor(&[8, 8, 3], &mut rng).map(|v| 0.5 + 0.5 * v))
        .collect();
    let labels = (0..2).map(|_| rng.random_range(0..3)).collect();
    let perms = (0..2).map(|_| rng.random_range(0..4)).collect();
    let rots = (0..2).map(|_| rng.random_range(0..4)).collect();
    (model, images, labels, perms, rots)
}

#[test]
fn every_objective_term_matches_finite_differences() {
    let weights = LossWeights {
        d_star: 2,
        ..LossWeights::default()
    };
    for seed in 0..12 {
        let (model, images, labels, perm_ids, rotations) = instance(seed);
        let batch = ObjectiveBatch {
            images: images.iter().collect(),
            labels,
            perm_ids,
            rotations,
        };
        for term in ObjectiveTerm::ALL {
            let reports = check_objective_term(&model, &batch, &weights, term, 3e-3, 1e-4).unwrap();
            for (p, r) in reports.iter().enumerate() {
                assert!(r.passed, "seed {seed} {term:?} parameter {p}: {r:?}");
            }
            assert!(reports.iter().map(|r| r.checked).sum::<usize>() > 0);
        }
    }
}

#[test]
fn classification_gradient_on_an_eight_dim_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feature = random_tensor(&[1, 8], &mut rng);
    let w = random_tensor(&[8, 3], &mut rng);
    let report = check_gradient(
        |g: &mut Graph, f| {
            let fc = g.l2_normalize(f)?;
            let wn = g.constant(w.clone())?;
            let wa = g.abs(wn)?;
            let wt = g.transpose(wa)?;
            let wc = g.l2_normalize(wt)?;
            let wc = g.transpose(wc)?;
            let cos = g.matmul(fc, wc)?;
            let logits = g.scale(cos, 30.0)?;
            g.softmax_cross_entropy(logits, &[1])
        },
        &feature,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, 8);
}

#[test]
fn zero_weight_terms_are_not_built() {
    let (model, images, labels, perm_ids, rotations) = instance(0);
    let batch = ObjectiveBatch {
        images: images.iter().collect(),
        labels,
        perm_ids,
        rotations,
    };
    let w = LossWeights {
        d_star: 2,
        ..LossWeights::baseline()
    };
    assert!(check_objective_term(&model, &batch, &w, ObjectiveTerm::Split, 1e-5, 1e-4).is_err());
    assert!(check_objective_term(&model, &batch, &w, ObjectiveTerm::Rotation, 1e-5, 1e-4).is_err());
}

#[test]
fn rounding_bound_only_discounts_unresolvable_differences() {
    use cfsl::gradcheck::resolved_relative_error;
    assert_eq!(resolved_relative_error(0.0, 2e-11, 7e-11), 0.0);
    assert!((resolved_relative_error(1.0, 1.001, 1e-12) - 1e-3 / 1.001).abs() < 1e-9);
    assert!(resolved_relative_error(0.0, 1e-6, 1e-11) > 0.99);
}
