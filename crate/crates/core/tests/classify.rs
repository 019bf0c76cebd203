mod common;

use facial_basis::classify::{
    component_weight_summary, nested_loo_evaluate, train_linear_svm, CvConfig, LabeledDataset,
};
use facial_basis::Error;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dataset(x: Array2<f64>, labels: &[&str]) -> LabeledDataset {
    let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    let ids = (0..labels.len()).map(|i| format!("v{i:03}")).collect();
    LabeledDataset::new(x, &labels, ids).unwrap()
}

/// Two Gaussian blobs, `per_class` each, separated along the first axis by
/// `gap` on either side of zero.
fn blobs(rng: &mut ChaCha8Rng, per_class: usize, dim: usize, gap: f64) -> (Array2<f64>, Vec<f64>) {
    let n = 2 * per_class;
    let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let x = Array2::from_shape_fn((n, dim), |(i, c)| {
        let v: f64 = 0.3 * rng.sample::<f64, _>(StandardNormal);
        if c == 0 { y[i] * (gap + v.abs()) } else { v }
    });
    (x, y)
}

fn names(y: &[f64]) -> Vec<&'static str> {
    y.iter().map(|&v| if v > 0.0 { "B" } else { "A" }).collect()
}

#[test]
fn symmetric_pair_splits_at_zero() {
    let x = array![[1.0], [-1.0]];
    let svm = train_linear_svm(x.view(), &[1.0, -1.0], 1000.0).unwrap();
    assert!(svm.bias.abs() <= 1e-9);
    assert!(svm.predict(x.row(0)) && !svm.predict(x.row(1)));
    assert!((svm.weights[0] - 1.0).abs() <= 1e-6);
}

#[test]
fn separable_blobs_train_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = blobs(&mut rng, 50, 2, 1.0);
    let svm = train_linear_svm(x.view(), &y, 100.0).unwrap();
    for (i, row) in x.rows().into_iter().enumerate() {
        assert_eq!(svm.predict(row), y[i] > 0.0, "point {i}");
    }
}

#[test]
fn small_instances_match_qp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for inst in 0..40 {
        let n = 3 + inst % 6;
        let mut y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        y.shuffle(&mut rng);
        let x = Array2::from_shape_fn((n, 2), |(i, _)| rng.sample::<f64, _>(StandardNormal) + 0.5 * y[i]);
        let c = [0.05, 0.5, 5.0, 50.0][inst % 4];
        let svm = train_linear_svm(x.view(), &y, c).unwrap();
        let want = common::svm_qp_weights(x.view(), &y, c);
        for k in 0..2 {
            assert!((svm.weights[k] - want[k]).abs() <= 1e-4, "instance {inst}: {} vs {want}", svm.weights);
        }
    }
}

#[test]
fn training_input_errors() {
    let x = array![[1.0], [2.0]];
    assert!(matches!(train_linear_svm(x.view(), &[1.0, 1.0], 1.0), Err(Error::Input(_))));
    assert!(matches!(train_linear_svm(x.view(), &[1.0, -1.0], 0.0), Err(Error::Input(_))));
    assert!(matches!(train_linear_svm(x.view(), &[1.0, 0.5], 1.0), Err(Error::Input(_))));
}

#[test]
fn separable_data_loo_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = blobs(&mut rng, 12, 4, 2.0);
    let report = nested_loo_evaluate(&dataset(x, &names(&y)), &CvConfig::default()).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.per_class_accuracy.values().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
}

#[test]
fn noise_loo_stays_near_chance() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Array2::from_shape_fn((40, 64), |_| rng.sample::<f64, _>(StandardNormal));
        let mut labels: Vec<&str> = (0..40).map(|i| if i < 20 { "A" } else { "B" }).collect();
        labels.shuffle(&mut rng);
        let cfg = CvConfig { seed, ..CvConfig::default() };
        let acc = nested_loo_evaluate(&dataset(x, &labels), &cfg).unwrap().accuracy;
        assert!((0.2..=0.8).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn too_few_videos_for_nesting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = blobs(&mut rng, 3, 2, 1.0);
    let data = dataset(x.clone(), &names(&y));
    let cfg = CvConfig { inner_folds: 6, ..CvConfig::default() };
    assert!(matches!(nested_loo_evaluate(&data, &cfg), Err(Error::Input(_) | Error::Config(_))));

    let lone: Vec<&str> = (0..6).map(|i| if i == 0 { "B" } else { "A" }).collect();
    let data = dataset(x, &lone);
    let cfg = CvConfig { inner_folds: 2, ..CvConfig::default() };
    assert!(matches!(nested_loo_evaluate(&data, &cfg), Err(Error::Stratification(_))));
}

#[test]
fn ties_choose_the_smaller_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = blobs(&mut rng, 10, 3, 3.0);
    let report = nested_loo_evaluate(&dataset(x, &names(&y)), &CvConfig::default()).unwrap();
    let mut ties = 0;
    for fold in &report.folds {
        let best = fold.inner_accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = fold.inner_accuracies.iter().position(|&a| a == best).unwrap();
        assert_eq!(fold.chosen_c, report.c_grid[first], "{}", fold.video_id);
        ties += usize::from(fold.inner_accuracies.iter().filter(|&&a| a == best).count() > 1);
    }
    assert!(ties > 0);
}

#[test]
fn evaluation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, y) = blobs(&mut rng, 10, 5, 0.2);
    let data = dataset(x, &names(&y));
    let cfg = CvConfig { seed: 9, ..CvConfig::default() };
    let a = nested_loo_evaluate(&data, &cfg).unwrap();
    let b = nested_loo_evaluate(&data, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn weight_summary_cases() {
    let channels: Vec<String> = ["p", "q", "r", "s"].iter().map(|s| s.to_string()).collect();
    let mut diag = Array1::zeros(16);
    diag[2 * 4 + 2] = 0.7;
    let summary = component_weight_summary(&[diag], &channels).unwrap();
    assert_eq!(summary[0].component, "r");
    assert!(summary[0].median > 0.0);
    assert!(summary[1..].iter().all(|c| c.max == 0.0));

    let uniform = component_weight_summary(&[Array1::from_elem(16, -0.3)], &channels).unwrap();
    assert!(uniform.iter().all(|c| (c.median - 0.3).abs() <= 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let weights: Vec<Array1<f64>> = (0..9)
        .map(|_| Array1::from_shape_fn(16, |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let summary = component_weight_summary(&weights, &channels).unwrap();
    for comp in &summary {
        let c = comp.channel_index;
        for (w, got) in weights.iter().zip(&comp.values) {
            let mut total = 0.0;
            let mut count = 0;
            for i in 0..4 {
                for j in 0..4 {
                    if i == c || j == c {
                        total += w[i * 4 + j].abs();
                        count += 1;
                    }
                }
            }
            assert_eq!(count, 7);
            assert!((got - total / 7.0).abs() <= 1e-12);
        }
    }
    assert!(summary.windows(2).all(|p| p[0].median >= p[1].median));
    assert!(component_weight_summary(&[Array1::zeros(15)], &channels).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn swapping_and_rescaling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = blobs(&mut rng, 9, 4, 0.3);
        let data = dataset(x.clone(), &names(&y));
        let cfg = CvConfig::default();
        let base = nested_loo_evaluate(&data, &cfg).unwrap();
        let swapped = nested_loo_evaluate(&data.swapped_labels(), &cfg).unwrap();
        for (a, b) in base.folds.iter().zip(&swapped.folds) {
            prop_assert_eq!(a.decision_value, -b.decision_value);
            prop_assert!(a.predicted != b.predicted);
            prop_assert_eq!(a.correct, b.correct);
        }
        let scales: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..10.0)).collect();
        let shifts: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let moved = Array2::from_shape_fn(x.dim(), |(i, c)| scales[c] * x[[i, c]] + shifts[c]);
        let rescaled = nested_loo_evaluate(&dataset(moved, &names(&y)), &cfg).unwrap();
        for (a, b) in base.folds.iter().zip(&rescaled.folds) {
            prop_assert_eq!(&a.predicted, &b.predicted);
        }
    }
}
