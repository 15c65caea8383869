use std::f64::consts::E;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Array, Tape};
use crate::data::{generate_toy, ImageSet, ToySpec};
use crate::nets::{Classifier, ClassifierConfig, Tier};

/// Explicit softmax and `τ²·Σ p·ln(p/q)`.
fn brute_force_kd(q_t: &[f64], q_s: &[f64], tau: f64) -> f64 {
    let soft = |q: &[f64]| {
        let e: Vec<f64> = q.iter().map(|v| (v / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let (p, q) = (soft(q_t), soft(q_s));
    tau * tau * p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
}

fn random_logits(rng: &mut ChaCha8Rng, k: usize, spread: f64) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(-spread..spread)).collect()
}

#[test]
fn kd_worked_values() {
    let v = kd_loss_value(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
    assert!((v - (E - 1.0) / (E + 1.0)).abs() < 1e-12);
    assert!((v - 0.462117).abs() < 1e-6);
    let p = ProbDist::softened(&[10.0, 0.0], 10.0).unwrap();
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((p.probs()[0] - oracle).abs() < 1e-15);
    assert!((p.probs()[0] - 0.731059).abs() < 1e-6 && (p.probs()[1] - 0.268941).abs() < 1e-6);
}

#[test]
fn hard_label_worked_values() {
    assert!((hard_label_loss_value(&[0.0; 10], 4).unwrap() - 10f64.ln()).abs() < 1e-12);
    let mut sure = vec![0.0; 10];
    sure[2] = 50.0;
    assert!(hard_label_loss_value(&sure, 2).unwrap() < 1e-9);
    let v = hard_label_loss_value(&[2.0, 0.0, 0.0], 0).unwrap();
    assert!((v - (1.0 + 2.0 * (-2.0f64).exp()).ln()).abs() < 1e-12);
    assert!((v - 0.239545).abs() < 1e-6);
    assert_eq!(hard_label_loss_value(&[0.0; 3], 3), Err(DistillError::LabelOutOfRange { label: 3, num_classes: 3 }));
}

#[test]
fn kd_matches_brute_force_and_vanishes_on_equal_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let k = rng.random_range(2..12);
        let tau = rng.random_range(0.5..20.0);
        let (a, b) = (random_logits(&mut rng, k, 8.0), random_logits(&mut rng, k, 8.0));
        let got = kd_loss_value(&a, &b, tau).unwrap();
        assert!((got - brute_force_kd(&a, &b, tau)).abs() < 1e-10);
        assert!(kd_loss_value(&a, &a, tau).unwrap().abs() < 1e-12);
    }
}

#[test]
fn batched_tape_loss_is_the_mean_of_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, k, tau) = (5, 4, 3.0);
    let qt = random_logits(&mut rng, b * k, 5.0);
    let qs = random_logits(&mut rng, b * k, 5.0);
    let mut tape = Tape::<f64>::new();
    let s = tape.param(Array::new(vec![b, k], qs.clone()).unwrap());
    let loss = kd_loss(&mut tape, &Array::new(vec![b, k], qt.clone()).unwrap(), s, tau).unwrap();
    let mean: f64 = qt.chunks(k).zip(qs.chunks(k)).map(|(t, s)| brute_force_kd(t, s, tau)).sum::<f64>() / b as f64;
    assert!((tape.value(loss).item() - mean).abs() < 1e-10);

    let mut tape = Tape::<f64>::new();
    let s = tape.param(Array::new(vec![b, k], qt.clone()).unwrap());
    let loss = kd_loss(&mut tape, &Array::new(vec![b, k], qt).unwrap(), s, tau).unwrap();
    assert!(tape.value(loss).item().abs() < 1e-12);
}

#[test]
fn kd_gradient_reaches_student_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let qt = Array::new(vec![3, 5], random_logits(&mut rng, 15, 4.0)).unwrap();
    let qs = Array::new(vec![3, 5], random_logits(&mut rng, 15, 4.0)).unwrap();
    let report =
        grad_check(|tape, vars| kd_loss(tape, &qt, vars[0], 2.0).map_err(into_ad), std::slice::from_ref(&qs), 1e-6)
            .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");

    // A tracked teacher is read by value and never differentiated.
    let mut tape = Tape::<f64>::new();
    let t = tape.param(qt.clone());
    let s = tape.param(qs);
    let teacher_value = tape.value(t).clone();
    let loss = kd_loss(&mut tape, &teacher_value, s, 2.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(t).unwrap().data().iter().all(|&g| g == 0.0));
    assert!(grads.get(s).unwrap().data().iter().any(|&g| g != 0.0));
}

#[test]
fn hard_label_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qs = Array::new(vec![4, 6], random_logits(&mut rng, 24, 4.0)).unwrap();
    let labels = [0, 5, 2, 2];
    let report =
        grad_check(|tape, vars| hard_label_loss(tape, vars[0], &labels).map_err(into_ad), &[qs], 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

fn into_ad(e: DistillError) -> crate::autodiff::AutodiffError {
    match e {
        DistillError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    assert_eq!(kd_loss_value(&[0.0], &[0.0], 0.0), Err(DistillError::BadTemperature(0.0)));
    assert!(matches!(kd_loss_value(&[0.0, 1.0], &[0.0], 1.0), Err(DistillError::LengthMismatch { .. })));
    assert!(matches!(kd_loss_value(&[f64::NAN, 1.0], &[0.0, 1.0], 1.0), Err(DistillError::NonFiniteLogits { .. })));
    let mut tape = Tape::<f64>::new();
    let s = tape.param(Array::zeros(vec![2, 3]));
    assert!(matches!(kd_loss(&mut tape, &Array::zeros(vec![2, 4]), s, 1.0), Err(DistillError::LengthMismatch { .. })));
    assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
    let both_zero = DistillConfig { soft_weight: 0.0, hard_weight: 0.0, ..Default::default() };
    assert!(matches!(both_zero.validate(), Err(DistillError::InvalidConfig(_))));
    assert_eq!(DistillConfig::default().tau, 10.0);
}

fn toy() -> (ImageSet, ImageSet) {
    let spec = ToySpec { num_classes: 3, train_per_class: 30, test_per_class: 10, seed: 4 };
    let (train, test) = generate_toy(&spec).unwrap();
    (train.images, test.images)
}

fn classifier(seed: u64) -> Classifier<f32> {
    Classifier::new(ClassifierConfig { tier: Tier::S, num_classes: 3, image_channels: 1 }, seed)
}

fn quick() -> SgdConfig {
    SgdConfig { epochs: 3, batch_size: 16, ..Default::default() }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let (train, test) = toy();
    let model = classifier(0);
    let cfg = SgdConfig { epochs: 0, ..quick() };
    let (out, report) = train_teacher(model.clone(), &train, &test, &cfg, "d").unwrap();
    assert_eq!(out.params(), model.params());
    assert_eq!(report.trace.len(), 1);
}

#[test]
fn teacher_training_learns_and_traces() {
    let (train, test) = toy();
    let (model, report) = train_teacher(classifier(0), &train, &test, &quick(), "abc").unwrap();
    assert_eq!(report.trace.len(), 6);
    assert!(report.trace.iter().all(|r| r.config_digest == "abc" && r.seed == 0));
    assert!(report.final_accuracy > 1.0 / 3.0, "{report:?}");
    assert_eq!(crate::metrics::accuracy(&model, &test).unwrap(), report.final_accuracy);
    let mut csv = Vec::new();
    write_trace(&mut csv, &report.trace).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,split,loss,accuracy,seed,config_digest\n1,train,"));
}

#[test]
fn student_training_is_reproducible_and_freezes_the_teacher() {
    let (train, test) = toy();
    let (teacher, _) = train_teacher(classifier(1), &train, &test, &quick(), "t").unwrap();
    let snapshot = teacher.params().clone();
    let config = DistillConfig { optim: quick(), ..Default::default() };
    let (a, ra) = train_student(classifier(2), &teacher, &train, &test, &config, "s").unwrap();
    let (b, rb) = train_student(classifier(2), &teacher, &train, &test, &config, "s").unwrap();
    assert_eq!(teacher.params(), &snapshot);
    assert_eq!(a.params(), b.params());
    assert_eq!(ra, rb);
    let combined = DistillConfig { hard_weight: 1.0, ..config };
    let (c, _) = train_student(classifier(2), &teacher, &train, &test, &combined, "s").unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn hard_only_distillation_is_supervised_training() {
    let (train, test) = toy();
    let teacher = classifier(5);
    let config = DistillConfig { soft_weight: 0.0, hard_weight: 1.0, optim: quick(), ..Default::default() };
    let (student, _) = train_student(classifier(3), &teacher, &train, &test, &config, "x").unwrap();
    let (supervised, _) = train_teacher(classifier(3), &train, &test, &quick(), "x").unwrap();
    assert_eq!(student.params(), supervised.params());
}

#[test]
fn class_count_mismatch_is_rejected() {
    let (train, test) = toy();
    let teacher = Classifier::<f32>::new(ClassifierConfig { tier: Tier::S, num_classes: 4, image_channels: 1 }, 0);
    let err = train_student(classifier(0), &teacher, &train, &test, &DistillConfig::default(), "").unwrap_err();
    assert_eq!(err, DistillError::ClassMismatch { teacher: 4, student: 3 });
}

proptest! {
    #[test]
    fn kd_is_nonnegative(
        a in proptest::collection::vec(-30.0f64..30.0, 2..10),
        b in proptest::collection::vec(-30.0f64..30.0, 10),
        tau in 0.1f64..50.0,
    ) {
        let b = &b[..a.len()];
        let v = kd_loss_value(&a, b, tau).unwrap();
        prop_assert!(v >= 0.0);
        let q = ProbDist::softened(&a, tau).unwrap();
        let p = ProbDist::softened(b, tau).unwrap();
        prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(q.kl_divergence(&p) >= -1e-12);
    }
}
