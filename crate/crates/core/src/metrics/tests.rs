use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_toy, ToySpec};
use crate::nets::{ClassifierConfig, Tier};

fn one_hot_logits(labels: &[usize], k: usize) -> LogitTable {
    let data = labels.iter().flat_map(|&l| (0..k).map(move |j| if j == l { 1000.0 } else { 0.0 })).collect();
    LogitTable::new(k, data)
}

#[test]
fn one_hot_predictions_are_fully_accurate() {
    let labels = [0, 3, 2, 2, 1];
    let logits = one_hot_logits(&labels, 4);
    assert_eq!(accuracy_from_logits(&logits, &labels).unwrap(), 1.0);
}

#[test]
fn constant_classifier_scores_one_over_k() {
    let spec = ToySpec { num_classes: 5, train_per_class: 3, test_per_class: 4, seed: 0 };
    let test = generate_toy(&spec).unwrap().1.images;
    let mut model = Classifier::<f32>::new(ClassifierConfig { tier: Tier::S, num_classes: 5, image_channels: 1 }, 0);
    for v in model.params_mut().values_mut() {
        *v = v.map(|_| 0.0);
    }
    assert!((accuracy(&model, &test).unwrap() - 0.2).abs() < 1e-12);
    assert_eq!(dist_variance(&model, &test).unwrap(), 0.0);
}

#[test]
fn accuracy_matches_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, k) = (500, 7);
    // Coarse integer logits make ties common.
    let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(0..4) as f64).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut hits = 0;
    for i in 0..n {
        let row = &data[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let first = row.iter().position(|&v| v == max).unwrap();
        hits += (first == labels[i]) as usize;
    }
    let got = accuracy_from_logits(&LogitTable::new(k, data), &labels).unwrap();
    assert_eq!(got, hits as f64 / n as f64);
}

#[test]
fn variance_closed_forms() {
    assert_eq!(distribution_variance(&[0.25; 4]), 0.0);
    assert_eq!(distribution_variance(&[1.0, 0.0]), 0.25);
    for k in [2, 3, 10, 1000] {
        let mut p = vec![0.0; k];
        p[k / 2] = 1.0;
        let expected = (k - 1) as f64 / (k * k) as f64;
        assert!((distribution_variance(&p) - expected).abs() < 1e-15);
        let logits = one_hot_logits(&[k / 3], k);
        assert!((dist_variance_from_logits(&logits).unwrap() - expected).abs() < 1e-15);
    }
}

#[test]
fn empty_and_mismatched_inputs_are_rejected() {
    let empty = LogitTable::new(3, Vec::new());
    assert_eq!(accuracy_from_logits(&empty, &[]), Err(MetricsError::Empty));
    assert_eq!(dist_variance_from_logits(&empty), Err(MetricsError::Empty));
    let spec = ToySpec { num_classes: 4, train_per_class: 1, test_per_class: 1, seed: 0 };
    let test = generate_toy(&spec).unwrap().1.images;
    let model = Classifier::<f32>::new(ClassifierConfig { tier: Tier::S, num_classes: 3, image_channels: 1 }, 0);
    assert_eq!(accuracy(&model, &test), Err(MetricsError::ClassMismatch { model: 3, dataset: 4 }));
}

#[test]
fn records_serialise_as_quoted_csv() {
    let context = MetricsContext {
        dataset_digest: "ab,c".into(),
        model_digest: "m".into(),
        guidance_scale: Some(2.0),
        sampling_steps: Some(100),
        tau: None,
        seed: Some(1),
    };
    let eval = TeacherEval { accuracy: 0.5, confidence: 0.75, dist_variance: 0.01 };
    let mut out = Vec::new();
    write_records(&mut out, &eval.records(&context)).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name,value,dataset_digest,model_digest,s,t_sample,tau,seed");
    assert_eq!(lines[1], "teacher_accuracy,0.5,\"ab,c\",m,2,100,,1");
    assert_eq!(lines.len(), 4);
}

proptest! {
    #[test]
    fn variance_is_permutation_invariant_and_bounded(
        logits in proptest::collection::vec(-20.0f64..20.0, 2..15),
        rot in 0usize..15,
    ) {
        let k = logits.len();
        let mut permuted = logits.clone();
        permuted.rotate_left(rot % k);
        permuted.reverse();
        let a = distribution_variance(&softmax(&logits));
        let b = distribution_variance(&softmax(&permuted));
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!(a >= 0.0 && a <= (k - 1) as f64 / (k * k) as f64 + 1e-15);
    }
}
