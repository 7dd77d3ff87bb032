//! Behavioural properties of training, the EM oracle and the noise processes.

use nmn::classifier::{train_baseline, Activation, ClassifierState, TrainOptions};
use nmn::config::Config;
use nmn::datagen::{
    generate_clean, inject_incorrect, inject_missing, inject_symmetric, replace_label_sets, Example, GeneratorConfig,
    NoiseCounts, SyntheticDataset,
};
use nmn::em::{e_step, gradient_equivalence_check, m_step_classifier, m_step_noise, noise_gradient};
use nmn::harness::{clean_splits, evaluate, stage_one, stage_two};
use nmn::model::{forward_batch, predict, Pooling};
use nmn::nmn::{predict_clean, train_joint, JointOptions, NmnState, NoiseMode};
use nmn::prob::{posterior, LabelVector, NoiseTransition, ProbVector};

fn small(n: usize, k: usize, seed: u64) -> SyntheticDataset {
    generate_clean(&GeneratorConfig {
        n_examples: n,
        num_classes: k,
        num_clusters: k.div_ceil(2),
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn opts(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        learning_rate: 0.25,
        batch_size: 32,
        pooling: Pooling::Mean,
    }
}

fn strong_classifier(data: &SyntheticDataset) -> ClassifierState {
    let mut clf = ClassifierState::new(data.feature_dim, &[32], data.num_classes, Activation::Relu, 1);
    train_baseline(&mut clf, &data.examples, &opts(30), 2).unwrap();
    clf
}

#[test]
fn zero_epochs_leave_states_unchanged() {
    let data = small(100, 4, 0);
    let clf = ClassifierState::new(16, &[8], 4, Activation::Relu, 3);
    let mut a = clf.clone();
    assert!(train_baseline(&mut a, &data.examples, &opts(0), 0).unwrap().is_empty());
    assert_eq!(a, clf);
    let head = NmnState::new(NoiseMode::FeatureDependent, 4, 8);
    let (mut b, mut h) = (clf.clone(), head.clone());
    train_joint(&mut b, &mut h, &data.examples, &JointOptions::new(opts(0)), 0).unwrap();
    assert_eq!((b, h), (clf, head));
}

#[test]
fn separable_toy_set_is_learned() {
    // Two classes, each tied to the sign of one coordinate.
    let examples: Vec<Example> = (0..200)
        .map(|i| {
            let x = [((i * 37) % 17) as f64 / 8.0 - 1.0 + 0.03, ((i * 11) % 13) as f64 / 6.0 - 1.0 + 0.04];
            let labels = LabelVector(vec![x[0] > 0.0, x[1] > 0.0]);
            Example {
                id: i,
                instances: vec![x.to_vec()],
                truth: labels.clone(),
                observed: labels,
            }
        })
        .collect();
    let data = SyntheticDataset {
        examples,
        num_classes: 2,
        feature_dim: 2,
        instances_per_bag: 1,
        seed: 0,
        noise: Vec::new(),
    };
    let mut clf = ClassifierState::new(2, &[8], 2, Activation::Relu, 4);
    train_baseline(&mut clf, &data.examples, &opts(50), 5).unwrap();
    assert!(evaluate(&clf, &data, Pooling::Mean, 1).unwrap().overall > 0.95);
}

#[test]
fn same_seed_gives_identical_training() {
    let data = small(300, 5, 1);
    let run = || {
        let mut clf = ClassifierState::new(16, &[16], 5, Activation::Relu, 9);
        train_baseline(&mut clf, &data.examples, &opts(3), 10).unwrap();
        clf
    };
    assert_eq!(run(), run());
}

#[test]
fn clean_generator_is_separable() {
    let cfg = Config::default();
    let splits = clean_splits(&cfg).unwrap();
    let (clf, _) = stage_one(&cfg, &splits.train, &splits.val).unwrap();
    let map = evaluate(&clf, &splits.test, Pooling::Mean, 1).unwrap().overall;
    assert!(map > 0.9, "clean baseline mAP {map}");
}

#[test]
fn joint_training_on_clean_data_does_not_degrade() {
    let cfg = Config::default();
    let splits = clean_splits(&cfg).unwrap();
    let (stage1, _) = stage_one(&cfg, &splits.train, &splits.val).unwrap();
    let before = evaluate(&stage1, &splits.test, Pooling::Mean, 1).unwrap().overall;
    for variant in [nmn::config::Variant::NmnFi, nmn::config::Variant::NmnFd] {
        let model = stage_two(&cfg, variant, &stage1, &splits.train, &splits.val).unwrap();
        let after = evaluate(&model.classifier, &splits.test, Pooling::Mean, 1).unwrap().overall;
        assert!(after >= before - 0.01, "{}: {before} -> {after}", variant.name());
    }
}

#[test]
fn joint_training_beats_equal_epoch_baseline_under_incorrect_labels() {
    let mut cfg = Config::default();
    cfg.data.noise = nmn::config::NoiseSpec::Incorrect;
    let splits = clean_splits(&cfg).unwrap();
    let train = inject_incorrect(splits.train.clone(), 0.4, 7).unwrap();
    let (stage1, _) = stage_one(&cfg, &train, &splits.val).unwrap();
    let score = |v| {
        let m = stage_two(&cfg, v, &stage1, &train, &splits.val).unwrap();
        evaluate(&m.classifier, &splits.test, Pooling::Mean, 1).unwrap().overall
    };
    let extra = score(nmn::config::Variant::BaselineExtra);
    let fd = score(nmn::config::Variant::NmnFd);
    assert!(fd > extra, "nmn-fd {fd} vs baseline-extra {extra}");
}

#[test]
fn predictions_ignore_the_noise_head() {
    let data = small(50, 3, 2);
    let clf = ClassifierState::new(16, &[8], 3, Activation::Relu, 1);
    let direct = predict(&clf, &data.examples, Pooling::Mean).unwrap();
    let clean = predict_clean(&clf, &data.examples, Pooling::Mean).unwrap();
    assert_eq!(direct, clean);
    // Same probabilities as a raw forward pass on single-instance inputs.
    let x = ndarray::Array2::from_shape_fn((50, 16), |(r, c)| data.examples[r].instances[0][c]);
    assert_eq!(clf.forward(x.view()).unwrap().probs, clean);
}

#[test]
fn mil_prediction_is_noisy_or_of_instances() {
    let data = generate_clean(&GeneratorConfig {
        n_examples: 20,
        num_classes: 3,
        instances_per_bag: 4,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let clf = ClassifierState::new(16, &[8], 3, Activation::Tanh, 2);
    let pooled = predict_clean(&clf, &data.examples, Pooling::NoisyOr).unwrap();
    for (r, e) in data.examples.iter().enumerate() {
        let x = ndarray::Array2::from_shape_fn((4, 16), |(i, c)| e.instances[i][c]);
        let probs = clf.forward(x.view()).unwrap().probs;
        let bag: Vec<ProbVector> = probs.rows().into_iter().map(|row| ProbVector(row.to_vec())).collect();
        let expected = nmn::mil::mil_pool(&bag).unwrap();
        for c in 0..3 {
            assert!((pooled[[r, c]] - expected.0[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn e_step_matches_posterior_formula_bitwise() {
    let data = small(40, 4, 3);
    let clf = ClassifierState::new(16, &[8], 4, Activation::Relu, 3);
    let mut head = NmnState::new(NoiseMode::FeatureDependent, 4, 8);
    let mut k = 0.0f64;
    head.for_each_param_mut(|p| {
        k += 0.37;
        *p = k.sin();
    });
    let rho = e_step(&clf, &head, &data.examples, Pooling::Mean).unwrap();
    let refs: Vec<&Example> = data.examples.iter().collect();
    let fwd = forward_batch(&clf, &refs, Pooling::Mean).unwrap();
    for (row, r) in rho.iter().enumerate() {
        let q = head.transition(&fwd.example_feature(row)).unwrap();
        assert_eq!(*r, posterior(&q, &fwd.example_probs(row)).unwrap());
    }
}

#[test]
fn e_step_handles_the_small_noise_example() {
    let q = NoiseTransition::uniform(1, 0.05, 0.05);
    let rho = posterior(&q, &ProbVector(vec![0.5])).unwrap();
    assert!((rho.at_observed(&LabelVector(vec![false]))[0] - 0.05).abs() < 1e-12);
}

#[test]
fn point_mass_posteriors_reduce_to_supervised_training() {
    // With Q pinned to identity the E-step returns the observed labels, and
    // one classifier M-step is gradient ascent on their log-likelihood.
    let data = small(60, 3, 4);
    let clf = ClassifierState::new(16, &[], 3, Activation::Relu, 6);
    let head = NmnState::pinned_identity(NoiseMode::FeatureIndependent, 3, 16);
    let rho = e_step(&clf, &head, &data.examples, Pooling::Mean).unwrap();
    let mut em = clf.clone();
    m_step_classifier(&mut em, &rho, &data.examples, 1, 0.5, Pooling::Mean).unwrap();
    // Full-batch gradient step on the mean cross-entropy with the same step.
    let mut sup = clf.clone();
    let refs: Vec<&Example> = data.examples.iter().collect();
    let fwd = forward_batch(&sup, &refs, Pooling::Mean).unwrap();
    let targets: Vec<&LabelVector> = data.examples.iter().map(|e| &e.observed).collect();
    let (_, grad) = nmn::model::bce_and_grad(&fwd.p_y, &targets).unwrap();
    let grads = nmn::model::backward_batch(&sup, &fwd, grad.view(), None).unwrap();
    sup.sgd_step(&grads, 0.5);
    for (a, b) in em.layers.iter().zip(&sup.layers) {
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn noise_gradient_vanishes_on_clean_data_at_identity() {
    let data = small(200, 3, 5);
    let clf = strong_classifier(&data);
    let head = NmnState::pinned_identity(NoiseMode::FeatureIndependent, 3, 32);
    let (_, gb) = noise_gradient(&clf, &head, &data.examples, Pooling::Mean).unwrap();
    let norm = gb.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "gradient norm {norm}");
}

#[test]
fn noise_m_step_moves_toward_the_flip_rate() {
    let clean = small(1000, 4, 6);
    let clf = strong_classifier(&clean);
    let noisy = inject_symmetric(clean, 0.2, 11).unwrap();
    let mut head = NmnState::with_diagonal(NoiseMode::FeatureIndependent, 4, 32, nmn::nmn::INIT_DIAGONAL_BIAS);
    let off = |h: &NmnState| {
        let q = h.transition(&[0.0; 32]).unwrap();
        q.mean_off_diagonal()
    };
    let mut trajectory = vec![off(&head)];
    for _ in 0..10 {
        m_step_noise(&clf, &mut head, &noisy.examples, 5, 1.0, Pooling::Mean).unwrap();
        trajectory.push(off(&head));
    }
    let dist: Vec<f64> = trajectory.iter().map(|o| (o - 0.2).abs()).collect();
    assert!(dist.windows(2).all(|w| w[1] <= w[0] + 1e-4), "{trajectory:?}");
    assert!(trajectory.windows(2).all(|w| w[1] >= w[0] - 1e-4), "{trajectory:?}");
    assert!(dist.last().unwrap() < &0.05, "{trajectory:?}");
}

#[test]
fn equivalence_report_properties() {
    let data = small(30, 3, 7);
    let clf = ClassifierState::new(16, &[8], 3, Activation::Relu, 7);
    let head = NmnState::pinned_identity(NoiseMode::FeatureIndependent, 3, 8);
    assert!(gradient_equivalence_check(&clf, &head, &data.examples).unwrap().max_abs_deviation <= 1e-12);
    let head = NmnState::new(NoiseMode::FeatureDependent, 3, 8);
    let forward = gradient_equivalence_check(&clf, &head, &data.examples).unwrap();
    let mut reversed = data.examples.clone();
    reversed.reverse();
    assert_eq!(forward, gradient_equivalence_check(&clf, &head, &reversed).unwrap());
}

// ---------------------------------------------------------------------------
// Noise processes

fn three_sigma(n: usize, p: f64) -> f64 {
    3.0 * (n as f64 * p * (1.0 - p)).sqrt()
}

#[test]
fn missing_flips_follow_the_binomial() {
    let data = small(20_000, 20, 8);
    let noisy = inject_missing(data, 0.3, 1).unwrap();
    let counts = NoiseCounts::of(&noisy);
    let positives: usize = counts.positives.iter().sum();
    let missing: usize = counts.missing.iter().sum();
    assert!(positives >= 10_000);
    assert!((missing as f64 - 0.3 * positives as f64).abs() <= three_sigma(positives, 0.3));
}

#[test]
fn incorrect_flips_scale_with_the_prior() {
    let data = small(20_000, 20, 9);
    let priors = data.class_priors();
    let noisy = inject_incorrect(data, 0.5, 2).unwrap();
    let counts = NoiseCounts::of(&noisy);
    for c in 0..20 {
        let p = 0.5 * priors[c];
        let expected = p * counts.negatives[c] as f64;
        assert!(
            (counts.incorrect[c] as f64 - expected).abs() <= three_sigma(counts.negatives[c], p) + 1.0,
            "class {c}"
        );
    }
}

#[test]
fn replacement_incorrect_rate_grows_with_fraction() {
    let data = small(5000, 20, 10);
    let rates: Vec<f64> = [0.2, 0.4, 0.6, 0.8]
        .iter()
        .map(|&f| NoiseCounts::of(&replace_label_sets(data.clone(), f, 3).unwrap()).incorrect_rate())
        .collect();
    assert!(rates.windows(2).all(|w| w[1] > w[0]), "{rates:?}");
}
