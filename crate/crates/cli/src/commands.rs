use std::path::{Path, PathBuf};

use serde_json::json;
use synthkd::data::{
    generate_toy, load_checkpoint, load_synthetic, save_checkpoint, save_synthetic, sha256_hex, Checkpoint, ImageSet,
    ModelArch,
};
use synthkd::diffusion::{generate_dataset, train_denoiser, SyntheticDataset};
use synthkd::distill::{train_student, train_teacher as fit_teacher, write_trace, DistillError, EpochRecord};
use synthkd::metrics::{predict_logits, write_records, MetricsContext, TeacherEval};
use synthkd::nets::{Classifier, Denoiser};

use crate::config::RunConfig;
use crate::error::CliError;

/// `a/model.ckpt` + `trace.csv` → `a/model.trace.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

pub fn toy_splits(cfg: &RunConfig) -> Result<(ImageSet, ImageSet), CliError> {
    let (train, test) = generate_toy(&cfg.toy).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((train.images, test.images))
}

pub fn write_trace_file(path: &Path, trace: &[EpochRecord]) -> Result<(), CliError> {
    write_trace(std::fs::File::create(path)?, trace)?;
    Ok(())
}

pub fn train_diffusion(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let (train, _) = toy_splits(cfg)?;
    let model = Denoiser::<f32>::new(cfg.denoiser_config(), cfg.denoiser.train.seed);
    let (model, trace) = train_denoiser(model, &train, &schedule, &cfg.denoiser.train)?;
    let (initial, last) =
        (trace.initial().unwrap_or(f64::NAN), trace.final_mean(trace.steps_per_epoch).unwrap_or(f64::NAN));
    let metadata = json!({
        "config_digest": cfg.digest(),
        "schedule_digest": schedule.digest(),
        "initial_loss": initial,
        "final_loss": last,
    });
    let digest = save_checkpoint(out, &Checkpoint::of_denoiser(&model, metadata))?;

    let mut w = csv::Writer::from_path(sibling(out, "loss.csv"))?;
    w.write_record(["step", "epoch", "loss", "seed", "config_digest"])?;
    let (seed, cd) = (cfg.denoiser.train.seed.to_string(), cfg.digest());
    for (i, loss) in trace.losses.iter().enumerate() {
        let epoch = i / trace.steps_per_epoch.max(1) + 1;
        w.write_record([i.to_string(), epoch.to_string(), loss.to_string(), seed.clone(), cd.clone()])?;
    }
    w.flush()?;
    println!("initial_loss={initial:.6}\nfinal_loss={last:.6}\ncheckpoint_digest={digest}");
    Ok(())
}

/// Loads a denoiser and checks it was trained for the configured schedule.
pub fn load_denoiser(cfg: &RunConfig, path: &Path) -> Result<(Denoiser<f32>, String), CliError> {
    let ckpt = load_checkpoint(path)?;
    let digest = ckpt.digest();
    let expected = cfg.schedule()?.digest();
    match ckpt.metadata.get("schedule_digest").and_then(|v| v.as_str()) {
        Some(d) if d == expected => {}
        other => {
            return Err(CliError::Data(format!(
                "{} was trained with schedule digest {other:?}, configuration declares {expected}",
                path.display()
            )))
        }
    }
    Ok((ckpt.into_denoiser()?, digest))
}

pub fn load_classifier(path: &Path) -> Result<(Classifier<f32>, Checkpoint), CliError> {
    let ckpt = load_checkpoint(path)?;
    if !matches!(ckpt.arch, ModelArch::Classifier(_)) {
        return Err(CliError::Data(format!("{} is not a classifier checkpoint", path.display())));
    }
    Ok((ckpt.clone().into_classifier()?, ckpt))
}

pub fn generate(cfg: &RunConfig, model: &Denoiser<f32>, workers: usize) -> Result<SyntheticDataset, CliError> {
    Ok(generate_dataset(model, &cfg.schedule()?, &cfg.gen, workers)?)
}

pub fn gen_data(cfg: &RunConfig, checkpoint: &Path, out: &Path, workers: usize) -> Result<(), CliError> {
    let (model, _) = load_denoiser(cfg, checkpoint)?;
    let ds = generate(cfg, &model, workers)?;
    let digest = save_synthetic(out, &ds)?;
    println!("images={}\npayload_digest={digest}", ds.len());
    Ok(())
}

pub fn train_teacher(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (train, test) = toy_splits(cfg)?;
    let model = Classifier::<f32>::new(cfg.classifier_config(cfg.teacher.tier), cfg.teacher.optim.seed);
    let (model, report) = fit_teacher(model, &train, &test, &cfg.teacher.optim, &cfg.digest())?;
    let metadata = json!({
        "config_digest": cfg.digest(),
        "test_accuracy": report.final_accuracy,
        "best_test_accuracy": report.best_accuracy,
        "seed": cfg.teacher.optim.seed,
    });
    let digest = save_checkpoint(out, &Checkpoint::of_classifier(&model, metadata))?;
    write_trace_file(&sibling(out, "trace.csv"), &report.trace)?;
    println!("test_accuracy={}\ncheckpoint_digest={digest}", report.final_accuracy);
    Ok(())
}

pub fn distill(cfg: &RunConfig, teacher: &Path, synthetic: &Path, out: &Path) -> Result<(), CliError> {
    cfg.distill.validate()?;
    let (teacher, teacher_ckpt) = load_classifier(teacher)?;
    let ds = load_synthetic(synthetic)?;
    if ds.num_classes() != teacher.num_classes() {
        return Err(DistillError::ClassMismatch { teacher: teacher.num_classes(), student: ds.num_classes() }.into());
    }
    let (_, test) = toy_splits(cfg)?;
    let student = Classifier::<f32>::new(cfg.classifier_config(cfg.student.tier), cfg.student.init_seed);
    let (student, report) = train_student(student, &teacher, &ds.images(), &test, &cfg.distill, &cfg.digest())?;
    let metadata = json!({
        "config_digest": cfg.digest(),
        "test_accuracy": report.final_accuracy,
        "best_test_accuracy": report.best_accuracy,
        "teacher_digest": teacher_ckpt.digest(),
        "synthetic_digest": sha256_hex(&std::fs::read(synthetic)?),
        "tau": cfg.distill.tau,
        "soft_weight": cfg.distill.soft_weight,
        "hard_weight": cfg.distill.hard_weight,
    });
    let digest = save_checkpoint(out, &Checkpoint::of_classifier(&student, metadata))?;
    write_trace_file(&sibling(out, "trace.csv"), &report.trace)?;
    println!(
        "test_accuracy={}\nbest_test_accuracy={}\ncheckpoint_digest={digest}",
        report.final_accuracy, report.best_accuracy
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, model: &Path, dataset: &str, out: Option<&Path>) -> Result<(), CliError> {
    let (classifier, ckpt) = load_classifier(model)?;
    let (images, dataset_digest, provenance) = match dataset {
        "test" | "train" => {
            let (train, test) = toy_splits(cfg)?;
            let images = if dataset == "test" { test } else { train };
            let digest =
                format!("toy:{dataset}:{}", sha256_hex(serde_json::to_string(&cfg.toy).unwrap_or_default().as_bytes()));
            (images, digest, None)
        }
        path => {
            let ds = load_synthetic(Path::new(path))?;
            let digest = sha256_hex(&std::fs::read(path)?);
            let p = ds.provenance.clone();
            (ds.images(), digest, Some(p))
        }
    };
    if images.num_classes() != classifier.num_classes() {
        return Err(CliError::Data(format!(
            "model predicts {} classes, dataset has {}",
            classifier.num_classes(),
            images.num_classes()
        )));
    }
    let eval = TeacherEval::from_logits(&predict_logits(&classifier, &images, false)?, images.labels())?;
    println!("accuracy={}\nconfidence={}\ndist_variance={}", eval.accuracy, eval.confidence, eval.dist_variance);
    if let Some(recorded) = ckpt.metadata.get("test_accuracy").and_then(|v| v.as_f64()) {
        println!("recorded_test_accuracy={recorded}");
    }
    if let Some(out) = out {
        let context = MetricsContext {
            dataset_digest,
            model_digest: ckpt.digest(),
            guidance_scale: provenance.as_ref().map(|p| p.guidance_scale),
            sampling_steps: provenance.as_ref().map(|p| p.sampling_steps),
            tau: ckpt.metadata.get("tau").and_then(|v| v.as_f64()),
            seed: provenance.as_ref().map(|p| p.seed),
        };
        write_records(std::fs::File::create(out)?, &eval.records(&context))?;
    }
    Ok(())
}
