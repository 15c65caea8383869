use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::process::{ancestral_update, guided_prediction};
use super::*;
use crate::autodiff::{grad_check_sampled, Array, Tape};
use crate::data::{generate_toy, ImageSet, ToySpec};
use crate::nets::{Condition, Denoiser, DenoiserConfig, NetError};

/// `ε(x, c) = a·x + b` for a class, `a·x` for the null condition.
struct Linear {
    a: f64,
    b: f64,
}

impl NoisePredictor<f64> for Linear {
    fn predict_noise(&self, x: &Array<f64>, _: &[usize], conds: &[Condition]) -> Result<Array<f64>, NetError> {
        let per = x.len() / conds.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| self.a * v + if conds[k / per] == Condition::Null { 0.0 } else { self.b })
            .collect();
        Ok(Array::new(x.shape().to_vec(), data).unwrap())
    }
}

struct Broken;

impl NoisePredictor<f64> for Broken {
    fn predict_noise(&self, x: &Array<f64>, _: &[usize], _: &[Condition]) -> Result<Array<f64>, NetError> {
        Ok(x.map(|_| f64::NAN))
    }
}

fn arr(shape: &[usize], data: Vec<f64>) -> Array<f64> {
    Array::new(shape.to_vec(), data).unwrap()
}

fn small_denoiser(classes: usize, t: usize) -> Denoiser<f64> {
    let config =
        DenoiserConfig { num_classes: classes, base_channels: 4, embed_dim: 8, max_timestep: t, ..Default::default() };
    Denoiser::new(config, 5)
}

#[test]
fn forward_noise_plug_in_values() {
    let s = make_schedule(2, 0.75, 0.8).unwrap();
    assert!((s.alpha_bar(1).unwrap() - 0.25).abs() < 1e-15);
    let x0 = arr(&[4], vec![1.0; 4]);
    let out = forward_noise(&x0, 1, &arr(&[4], vec![0.0; 4]), &s).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

    // Near-zero noise leaves x0 nearly untouched.
    let s = make_schedule(10, 1e-12, 2e-12).unwrap();
    let x0 = arr(&[3], vec![0.3, -0.7, 0.9]);
    let out = forward_noise(&x0, 1, &arr(&[3], vec![1.0; 3]), &s).unwrap();
    for (a, b) in out.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    assert!(matches!(forward_noise(&x0, 11, &x0, &s), Err(DiffusionError::TimestepOutOfRange { t: 11, .. })));
}

#[test]
fn forward_noise_matches_marginal_moments() {
    let s = make_schedule(DEFAULT_T_TRAIN, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 20_000;
    let x0 = arr(&[n], vec![0.6; n]);
    let eps = arr(&[n], (0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
    for t in [1, 100, 400] {
        let ab = s.alpha_bar(t).unwrap();
        let xt = forward_noise(&x0, t, &eps, &s).unwrap();
        let mean = xt.data().iter().sum::<f64>() / n as f64;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (mu, sd2) = (ab.sqrt() * 0.6, 1.0 - ab);
        assert!((mean - mu).abs() < 3.0 * (sd2 / n as f64).sqrt(), "t={t} mean {mean} vs {mu}");
        assert!((var - sd2).abs() < 3.0 * sd2 * (2.0 / (n - 1) as f64).sqrt(), "t={t} var {var} vs {sd2}");
    }
}

#[test]
fn guidance_identities() {
    let c = arr(&[3], vec![0.1, -2.0, 3.5]);
    let u = arr(&[3], vec![1.0, 0.5, -0.25]);
    let out = guided_noise(&c, &u, 1.0).unwrap();
    assert_eq!(out.data(), c.data());
    for s in [1.0, 2.0, 4.0, 8.0] {
        assert_eq!(guided_noise(&u, &u, s).unwrap().data(), u.data());
    }
    let two = guided_noise(&arr(&[1], vec![1.0]), &arr(&[1], vec![0.0]), 2.0).unwrap();
    assert_eq!(two.data(), &[2.0]);
    assert_eq!(guided_noise(&c, &u, 0.5).unwrap_err(), DiffusionError::InvalidGuidance(0.5));
    assert!(matches!(guided_noise(&c, &arr(&[2], vec![0.0; 2]), 2.0), Err(DiffusionError::ShapeMismatch { .. })));
}

#[test]
fn two_step_chain_matches_hand_evaluation() {
    let schedule = make_schedule(2, 0.1, 0.2).unwrap();
    let plan = schedule.respace(2).unwrap();
    let model = Linear { a: 0.3, b: 0.5 };
    let s = 2.0;
    let x2 = [0.7, -1.2];
    let mut rngs = vec![ChaCha8Rng::seed_from_u64(11)];
    let mut oracle_rng = rngs[0].clone();

    let x = arr(&[1, 1, 1, 2], x2.to_vec());
    let x1 = denoise_step(&model, &x, 1, &plan, &[0], s, &mut rngs).unwrap();
    let x0 = denoise_step(&model, &x1, 0, &plan, &[0], s, &mut rngs).unwrap();

    // ε̂ = a·x + s·b; step t: (x − β/√(1−ā)·ε̂)/√(1−β) + √β·z.
    let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut oracle_rng)).collect();
    let eps = |x: f64| 0.3 * x + 2.0 * 0.5;
    for k in 0..2 {
        let (b2, ab2) = (0.2, 0.9 * 0.8);
        let h1 = (x2[k] - b2 / (1.0f64 - ab2).sqrt() * eps(x2[k])) / (1.0f64 - b2).sqrt() + b2.sqrt() * z[k];
        let (b1, ab1) = (0.1, 0.9);
        let h0 = (h1 - b1 / (1.0f64 - ab1).sqrt() * eps(h1)) / (1.0f64 - b1).sqrt();
        assert!((x1.data()[k] - h1).abs() < 1e-10);
        assert!((x0.data()[k] - h0).abs() < 1e-10, "{} vs {h0}", x0.data()[k]);
    }
}

#[test]
fn final_step_is_noise_free_and_deterministic() {
    let schedule = make_schedule(4, 0.1, 0.2).unwrap();
    let plan = schedule.respace(4).unwrap();
    let model = Linear { a: 0.1, b: 0.0 };
    let x = arr(&[1, 1, 1, 3], vec![0.2, 0.4, -0.1]);
    let a = denoise_step(&model, &x, 0, &plan, &[1], 1.0, &mut [ChaCha8Rng::seed_from_u64(1)]).unwrap();
    let b = denoise_step(&model, &x, 0, &plan, &[1], 1.0, &mut [ChaCha8Rng::seed_from_u64(2)]).unwrap();
    assert_eq!(a, b);
    let eps = guided_prediction(&model, &x, 1, &[1], 1.0).unwrap();
    assert_eq!(a, ancestral_update(&x, &eps, &plan.steps[0], None));

    let c = denoise_step(&model, &x, 2, &plan, &[1], 1.0, &mut [ChaCha8Rng::seed_from_u64(1)]).unwrap();
    let d = denoise_step(&model, &x, 2, &plan, &[1], 1.0, &mut [ChaCha8Rng::seed_from_u64(1)]).unwrap();
    assert_eq!(c, d);
    assert_ne!(a, c);
}

#[test]
fn non_finite_step_reports_position() {
    let schedule = make_schedule(4, 0.1, 0.2).unwrap();
    let plan = schedule.respace(2).unwrap();
    let x = arr(&[1, 1, 1, 2], vec![0.0; 2]);
    let err = denoise_step(&Broken, &x, 1, &plan, &[0], 2.0, &mut [ChaCha8Rng::seed_from_u64(0)]).unwrap_err();
    assert_eq!(err, DiffusionError::NonFinite { position: 1, t: 4 });
}

#[test]
fn sampling_gives_up_after_bounded_attempts() {
    let schedule = make_schedule(4, 0.1, 0.2).unwrap();
    let plan = schedule.respace(2).unwrap();
    let jobs = [SampleJob { class: 1, index: 0 }];
    let err = sample_images(&Broken, &plan, 1.0, (1, 2, 2), &jobs, 0, 1).unwrap_err();
    assert_eq!(err, DiffusionError::SamplingFailed { class: 1, index: 0, attempts: MAX_ATTEMPTS });
}

#[test]
fn full_respacing_samples_like_the_unrespaced_chain() {
    let schedule = make_schedule(6, 0.05, 0.3).unwrap();
    let plan = schedule.respace(6).unwrap();
    for (i, step) in plan.steps.iter().enumerate() {
        assert_eq!(step.t, i + 1);
        assert_eq!(step.beta, schedule.beta(i + 1).unwrap());
        assert_eq!(step.sigma, schedule.sigma(i + 1).unwrap());
    }
    // Unrespaced chain built directly from the schedule.
    let direct = SamplingPlan {
        steps: (1..=6)
            .map(|t| {
                let beta = schedule.beta(t).unwrap();
                PlanStep { t, beta, alpha: 1.0 - beta, alpha_bar: schedule.alpha_bar(t).unwrap(), sigma: beta.sqrt() }
            })
            .collect(),
    };
    let model = Linear { a: 0.2, b: 0.4 };
    let jobs: Vec<SampleJob> = (0..3).map(|index| SampleJob { class: 0, index }).collect();
    let a = sample_images(&model, &plan, 2.0, (1, 2, 2), &jobs, 9, 1).unwrap();
    let b = sample_images(&model, &direct, 2.0, (1, 2, 2), &jobs, 9, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sampling_is_independent_of_worker_count() {
    let schedule = make_schedule(20, 0.01, 0.2).unwrap();
    let plan = schedule.respace(5).unwrap();
    let model = small_denoiser(3, 20);
    let jobs: Vec<SampleJob> = (0..3).flat_map(|class| (0..25).map(move |index| SampleJob { class, index })).collect();
    let one = sample_images(&model, &plan, 2.0, (1, 16, 16), &jobs, 4, 1).unwrap();
    let four = sample_images(&model, &plan, 2.0, (1, 16, 16), &jobs, 4, 4).unwrap();
    assert_eq!(one, four);
    assert!(one.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn generated_dataset_has_exact_class_counts_and_provenance() {
    let schedule = make_schedule(20, 0.01, 0.2).unwrap();
    let model = small_denoiser(10, 20);
    let config = GenConfig { guidance_scale: 2.0, sampling_steps: 3, per_class_count: 2, seed: 1, classes: None };
    let ds = generate_dataset(&model, &schedule, &config, 1).unwrap();
    assert_eq!(ds.len(), 20);
    assert_eq!(ds.images().class_counts(), vec![2; 10]);
    assert_eq!(ds.provenance.schedule_digest, schedule.digest());
    assert_eq!(ds.provenance.sampling_steps, 3);
    let again = generate_dataset(&model, &schedule, &config, 2).unwrap();
    assert_eq!(ds, again);

    let prefix = ds.per_class_prefix(1);
    let direct = generate_dataset(&model, &schedule, &GenConfig { per_class_count: 1, ..config.clone() }, 1).unwrap();
    assert_eq!(prefix, direct);

    let bad = GenConfig { sampling_steps: 21, ..config.clone() };
    assert!(matches!(generate_dataset(&model, &schedule, &bad, 1), Err(DiffusionError::InvalidConfig(_))));
    let bad = GenConfig { classes: Some(vec![3, 3]), ..config };
    assert!(generate_dataset(&model, &schedule, &bad, 1).is_err());
}

#[test]
fn guidance_scale_one_equals_conditional_sampling() {
    let x = arr(&[2, 1, 1, 2], vec![0.1, 0.2, 0.3, 0.4]);
    let model = Linear { a: 0.5, b: 1.0 };
    let eps = guided_prediction(&model, &x, 3, &[0, 1], 1.0).unwrap();
    let direct = model.predict_noise(&x, &[3, 3], &[Condition::Class(0), Condition::Class(1)]).unwrap();
    assert_eq!(eps, direct);
}

fn toy(classes: usize, per_class: usize) -> ImageSet {
    let spec = ToySpec { num_classes: classes, train_per_class: per_class, test_per_class: 1, seed: 3 };
    generate_toy(&spec).unwrap().0.images
}

#[test]
fn dropped_conditions_follow_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let labels = vec![2; 10_000];
    assert!(drop_conditions(&labels, 0.0, &mut rng).iter().all(|c| *c == Condition::Class(2)));
    let nulls = drop_conditions(&labels, 0.1, &mut rng).iter().filter(|c| **c == Condition::Null).count();
    assert!((800..1200).contains(&nulls), "{nulls}");
}

#[test]
fn null_row_gets_no_gradient_without_dropout() {
    let schedule = make_schedule(20, 0.01, 0.2).unwrap();
    let mut model = small_denoiser(3, 20);
    // Non-zero output layer so gradients reach the embedding table.
    for name in ["out.w", "out.b"] {
        let v = model.params_mut().get_mut(name).unwrap();
        *v = v.map(|_| 0.01);
    }
    let data = toy(3, 2);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = data.batch::<f64>(&idx, None);
    let eps =
        Array::new(x0.shape().to_vec(), (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
    let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=20)).collect();
    let conds = drop_conditions(data.labels(), 0.0, &mut rng);
    let mut tape = Tape::new();
    let vars = model.params().register(&mut tape, true);
    let loss = denoiser_loss(&model, &mut tape, &vars, &schedule, &x0, &ts, &eps, &conds).unwrap();
    let grads = tape.backward(loss).unwrap();
    let table_idx = model.params().names().iter().position(|n| n == "class_table").unwrap();
    let g = grads.get(vars[table_idx]).unwrap();
    let e = g.shape()[1];
    assert!(g.data()[3 * e..].iter().all(|&v| v == 0.0));
    assert!(g.data()[..3 * e].iter().any(|&v| v != 0.0));
}

#[test]
fn denoiser_loss_gradient_matches_finite_differences() {
    let schedule = make_schedule(20, 0.01, 0.2).unwrap();
    let model = small_denoiser(3, 20);
    let mut params = model.params().clone();
    for name in ["out.w", "out.b"] {
        let v = params.get_mut(name).unwrap();
        *v = v.map(|_| 0.05);
    }
    let model = Denoiser::from_params(model.config().clone(), params.clone()).unwrap();
    let data = toy(3, 1);
    let idx = [0, 1, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = data.batch::<f64>(&idx, None);
    let eps =
        Array::new(x0.shape().to_vec(), (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
    let ts = [3, 11, 20];
    let conds = [Condition::Class(0), Condition::Null, Condition::Class(2)];
    let report = grad_check_sampled(
        |tape, vars| {
            denoiser_loss(&model, tape, vars, &schedule, &x0, &ts, &eps, &conds).map_err(|e| match e {
                DiffusionError::Autodiff(a) => a,
                other => panic!("{other}"),
            })
        },
        params.values(),
        1e-6,
        200,
        8,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn initial_loss_is_unit_and_training_reduces_it() {
    let schedule = make_schedule(50, 0.002, 0.2).unwrap();
    let model = Denoiser::<f32>::new(
        DenoiserConfig { num_classes: 3, base_channels: 4, embed_dim: 8, max_timestep: 50, ..Default::default() },
        1,
    );
    let data = toy(3, 40);
    let config = DenoiserTrainConfig { epochs: 6, batch_size: 16, lr: 3e-3, ..Default::default() };
    let (_, trace) = train_denoiser(model.clone(), &data, &schedule, &config).unwrap();
    let initial = trace.initial().unwrap();
    assert!((initial - 1.0).abs() < 0.15, "{initial}");
    assert_eq!(trace.epoch_means().len(), 6);
    let smoothed = trace.smoothed();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]));
    assert!(trace.final_mean(8).unwrap() < initial);

    let bad = DenoiserTrainConfig { cond_dropout: 1.0, ..config };
    assert!(matches!(train_denoiser(model, &data, &schedule, &bad), Err(DiffusionError::InvalidConfig(_))));
}
