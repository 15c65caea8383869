//! Experiment grids. Each cell writes its own CSV and a completion marker;
//! a rerun skips cells whose marker and CSV still verify.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use synthkd::data::{
    load_checkpoint, load_synthetic, save_checkpoint, save_synthetic, sha256_hex, Checkpoint, ImageSet,
};
use synthkd::diffusion::{GenConfig, SyntheticDataset};
use synthkd::distill::{train_student, train_teacher, DistillConfig};
use synthkd::metrics::teacher_eval_on_synthetic;
use synthkd::nets::{Classifier, Denoiser, Tier};

use crate::commands::{generate, load_classifier, load_denoiser, toy_splits};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::SweepKind;

/// One result row; unused columns stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub kind: String,
    pub cell: String,
    /// Seed, or the `;`-joined seeds in a summary row.
    pub seed: String,
    pub s: Option<f64>,
    pub t_sample: Option<usize>,
    pub per_class: Option<usize>,
    pub epochs: Option<usize>,
    pub tau: Option<f64>,
    pub soft_weight: Option<f64>,
    pub hard_weight: Option<f64>,
    pub teacher_tier: Option<Tier>,
    pub student_tier: Option<Tier>,
    pub teacher_test_accuracy: Option<f64>,
    pub teacher_accuracy: Option<f64>,
    pub teacher_confidence: Option<f64>,
    pub dist_variance: Option<f64>,
    pub student_accuracy: Option<f64>,
    pub student_best_accuracy: Option<f64>,
    pub config_digest: String,
    pub denoiser_digest: String,
    pub teacher_digest: String,
    pub synthetic_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Marker {
    cell: String,
    config_digest: String,
    rows_sha256: String,
    finished_unix: u64,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    out_dir: &'a Path,
    denoiser: Denoiser<f32>,
    denoiser_digest: String,
    teacher: Classifier<f32>,
    teacher_digest: String,
    test: ImageSet,
    train: ImageSet,
    workers: usize,
}

impl Context<'_> {
    fn base_row(&self, kind: SweepKind, cell: &str, seed: u64) -> Row {
        Row {
            kind: kind.name().into(),
            cell: cell.into(),
            seed: seed.to_string(),
            config_digest: self.cfg.digest(),
            denoiser_digest: self.denoiser_digest.clone(),
            teacher_digest: self.teacher_digest.clone(),
            ..Row::default()
        }
    }

    /// Generated set for `(s, steps, per_class, seed)`, cached on disk and
    /// reused when its provenance matches.
    fn synthetic(&self, s: f64, steps: usize, per_class: usize, seed: u64) -> Result<SyntheticDataset, CliError> {
        let path = self.out_dir.join("synthetic").join(format!("s{s}_t{steps}_n{per_class}_seed{seed}.skds"));
        if let Ok(ds) = load_synthetic(&path) {
            let p = &ds.provenance;
            if p.denoiser_digest == synthkd::data::params_digest(self.denoiser.params())
                && p.guidance_scale == s
                && p.sampling_steps == steps
                && p.per_class_count == per_class
                && p.seed == seed
            {
                return Ok(ds);
            }
        }
        let mut cfg = self.cfg.clone();
        cfg.gen =
            GenConfig { guidance_scale: s, sampling_steps: steps, per_class_count: per_class, seed, classes: None };
        let ds = generate(&cfg, &self.denoiser, self.workers)?;
        save_synthetic(&path, &ds)?;
        Ok(ds)
    }

    fn distill(
        &self,
        teacher: &Classifier<f32>,
        student_tier: Tier,
        ds: &SyntheticDataset,
        config: &DistillConfig,
        seed: u64,
        row: &mut Row,
    ) -> Result<(), CliError> {
        let mut config = config.clone();
        config.optim.seed = seed;
        let student =
            Classifier::<f32>::new(self.cfg.classifier_config(student_tier), self.cfg.student.init_seed + seed);
        let (_, report) = train_student(student, teacher, &ds.images(), &self.test, &config, &self.cfg.digest())?;
        row.student_tier = Some(student_tier);
        row.tau = Some(config.tau);
        row.soft_weight = Some(config.soft_weight);
        row.hard_weight = Some(config.hard_weight);
        row.epochs = Some(config.optim.epochs);
        row.student_accuracy = Some(report.final_accuracy);
        row.student_best_accuracy = Some(report.best_accuracy);
        row.synthetic_digest = synthkd::data::sha256_hex(ds.pixels());
        Ok(())
    }

    /// Teacher of `tier`: the supplied one when tiers match, otherwise trained
    /// on real data and cached.
    fn teacher_of(&self, tier: Tier) -> Result<(Classifier<f32>, String, f64), CliError> {
        if tier == self.teacher.tier() {
            let acc = synthkd::metrics::accuracy(&self.teacher, &self.test)?;
            return Ok((self.teacher.clone(), self.teacher_digest.clone(), acc));
        }
        let path = self.out_dir.join("teachers").join(format!("{tier}.ckpt"));
        if let Ok(ckpt) = load_checkpoint(&path) {
            if ckpt.metadata.get("config_digest").and_then(|v| v.as_str()) == Some(self.cfg.digest().as_str()) {
                let acc = ckpt.metadata.get("test_accuracy").and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
                let digest = ckpt.digest();
                return Ok((ckpt.into_classifier()?, digest, acc));
            }
        }
        let optim = &self.cfg.teacher.optim;
        let model = Classifier::<f32>::new(self.cfg.classifier_config(tier), optim.seed);
        let (model, report) = train_teacher(model, &self.train, &self.test, optim, &self.cfg.digest())?;
        let metadata = serde_json::json!({"config_digest": self.cfg.digest(), "test_accuracy": report.final_accuracy});
        let digest = save_checkpoint(&path, &Checkpoint::of_classifier(&model, metadata))?;
        Ok((model, digest, report.final_accuracy))
    }
}

/// Runs one cell for one seed.
type CellFn = Box<dyn Fn(&Context, u64) -> Result<Row, CliError>>;

struct Cell {
    id: String,
    run: CellFn,
}

fn cells(kind: SweepKind, cfg: &RunConfig) -> Vec<Cell> {
    let sw = cfg.sweep.clone();
    let gen = cfg.gen.clone();
    let base = cfg.distill.clone();
    let student_tier = cfg.student.tier;
    let mut out = Vec::new();
    match kind {
        SweepKind::Fidelity => {
            for &s in &sw.guidance_scales {
                for &t in &sw.sampling_steps {
                    let (base, n) = (base.clone(), sw.per_class);
                    out.push(Cell {
                        id: format!("s{s}_t{t}"),
                        run: Box::new(move |ctx, seed| {
                            let ds = ctx.synthetic(s, t, n, seed)?;
                            let mut row = ctx.base_row(kind, &format!("s{s}_t{t}"), seed);
                            let eval = teacher_eval_on_synthetic(&ctx.teacher, &ds)?;
                            (row.s, row.t_sample, row.per_class) = (Some(s), Some(t), Some(n));
                            row.teacher_tier = Some(ctx.teacher.tier());
                            row.teacher_accuracy = Some(eval.accuracy);
                            row.teacher_confidence = Some(eval.confidence);
                            row.dist_variance = Some(eval.dist_variance);
                            ctx.distill(&ctx.teacher, student_tier, &ds, &base, seed, &mut row)?;
                            Ok(row)
                        }),
                    });
                }
            }
        }
        SweepKind::Capacity => {
            for &tt in &sw.teacher_tiers {
                for &st in &sw.student_tiers {
                    let (base, gen, n) = (base.clone(), gen.clone(), sw.per_class);
                    let id = format!("teacher{tt}_student{st}");
                    out.push(Cell {
                        id: id.clone(),
                        run: Box::new(move |ctx, seed| {
                            let ds = ctx.synthetic(gen.guidance_scale, gen.sampling_steps, n, seed)?;
                            let (teacher, digest, acc) = ctx.teacher_of(tt)?;
                            let mut row = ctx.base_row(kind, &id, seed);
                            (row.s, row.t_sample, row.per_class) =
                                (Some(gen.guidance_scale), Some(gen.sampling_steps), Some(n));
                            row.teacher_tier = Some(tt);
                            row.teacher_digest = digest;
                            row.teacher_test_accuracy = Some(acc);
                            let eval = teacher_eval_on_synthetic(&teacher, &ds)?;
                            row.teacher_accuracy = Some(eval.accuracy);
                            row.dist_variance = Some(eval.dist_variance);
                            ctx.distill(&teacher, st, &ds, &base, seed, &mut row)?;
                            Ok(row)
                        }),
                    });
                }
            }
        }
        SweepKind::Temperature | SweepKind::Labels => {
            let modes: Vec<(String, DistillConfig)> = if kind == SweepKind::Temperature {
                sw.taus
                    .iter()
                    .map(|&tau| {
                        (format!("tau{tau}"), DistillConfig { tau, soft_weight: 1.0, hard_weight: 0.0, ..base.clone() })
                    })
                    .collect()
            } else {
                [("soft", 1.0, 0.0), ("hard", 0.0, 1.0), ("both", 1.0, 1.0)]
                    .into_iter()
                    .map(|(name, soft, hard)| {
                        (name.to_string(), DistillConfig { soft_weight: soft, hard_weight: hard, ..base.clone() })
                    })
                    .collect()
            };
            for (id, config) in modes {
                let (gen, n) = (gen.clone(), sw.per_class);
                out.push(Cell {
                    id: id.clone(),
                    run: Box::new(move |ctx, seed| {
                        let ds = ctx.synthetic(gen.guidance_scale, gen.sampling_steps, n, seed)?;
                        let mut row = ctx.base_row(kind, &id, seed);
                        (row.s, row.t_sample, row.per_class) =
                            (Some(gen.guidance_scale), Some(gen.sampling_steps), Some(n));
                        row.teacher_tier = Some(ctx.teacher.tier());
                        ctx.distill(&ctx.teacher, student_tier, &ds, &config, seed, &mut row)?;
                        Ok(row)
                    }),
                });
            }
        }
        SweepKind::Diversity | SweepKind::Scale => {
            let largest = sw.sizes.iter().copied().max().unwrap_or(0);
            for &n in &sw.sizes {
                let mut config = base.clone();
                if kind == SweepKind::Diversity {
                    config.optim.epochs = (sw.iteration_budget / n).max(1);
                }
                let gen = gen.clone();
                let id = format!("n{n}");
                out.push(Cell {
                    id: id.clone(),
                    run: Box::new(move |ctx, seed| {
                        // Smaller sets are prefixes of the largest, as generated with the same seed.
                        let ds =
                            ctx.synthetic(gen.guidance_scale, gen.sampling_steps, largest, seed)?.per_class_prefix(n);
                        let mut row = ctx.base_row(kind, &id, seed);
                        (row.s, row.t_sample, row.per_class) =
                            (Some(gen.guidance_scale), Some(gen.sampling_steps), Some(n));
                        row.teacher_tier = Some(ctx.teacher.tier());
                        ctx.distill(&ctx.teacher, student_tier, &ds, &config, seed, &mut row)?;
                        Ok(row)
                    }),
                });
            }
        }
    }
    out
}

fn write_rows(path: &Path, rows: &[Row]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Row>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<Row>, _>>()?)
}

/// Rows of a completed cell, if its marker matches the CSV and the config.
fn completed(dir: &Path, id: &str, config_digest: &str) -> Option<Vec<Row>> {
    let marker: Marker = serde_json::from_slice(&std::fs::read(dir.join("done.json")).ok()?).ok()?;
    let csv_bytes = std::fs::read(dir.join("cell.csv")).ok()?;
    (marker.cell == id && marker.config_digest == config_digest && marker.rows_sha256 == sha256_hex(&csv_bytes))
        .then(|| read_rows(&dir.join("cell.csv")).ok())
        .flatten()
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed-averaged row per cell, in grid order.
pub fn summarize(cells: &[(String, Vec<Row>)]) -> Vec<Row> {
    cells
        .iter()
        .filter_map(|(_, rows)| {
            let first = rows.first()?;
            let m = |f: fn(&Row) -> Option<f64>| mean(rows.iter().map(f));
            Some(Row {
                seed: rows.iter().map(|r| r.seed.as_str()).collect::<Vec<_>>().join(";"),
                teacher_test_accuracy: m(|r| r.teacher_test_accuracy),
                teacher_accuracy: m(|r| r.teacher_accuracy),
                teacher_confidence: m(|r| r.teacher_confidence),
                dist_variance: m(|r| r.dist_variance),
                student_accuracy: m(|r| r.student_accuracy),
                student_best_accuracy: m(|r| r.student_best_accuracy),
                synthetic_digest: String::new(),
                ..first.clone()
            })
        })
        .collect()
}

pub fn run(
    kind: SweepKind,
    cfg: &RunConfig,
    denoiser: &Path,
    teacher: &Path,
    out_dir: &Path,
    workers: usize,
) -> Result<(), CliError> {
    if cfg.sweep.seeds.is_empty() {
        return Err(CliError::Usage("sweep needs at least one seed".into()));
    }
    cfg.distill.validate()?;
    let (denoiser, denoiser_digest) = load_denoiser(cfg, denoiser)?;
    let (teacher, teacher_ckpt) = load_classifier(teacher)?;
    let (train, test) = toy_splits(cfg)?;
    let ctx = Context {
        cfg,
        out_dir,
        denoiser,
        denoiser_digest,
        teacher,
        teacher_digest: teacher_ckpt.digest(),
        test,
        train,
        workers,
    };
    let digest = cfg.digest();
    let kind_dir: PathBuf = out_dir.join(kind.name());
    let mut results = Vec::new();
    for cell in cells(kind, cfg) {
        let dir = kind_dir.join(&cell.id);
        if let Some(rows) = completed(&dir, &cell.id, &digest) {
            eprintln!("{}: {} already complete", kind.name(), cell.id);
            results.push((cell.id, rows));
            continue;
        }
        std::fs::create_dir_all(&dir)?;
        let rows = cfg.sweep.seeds.iter().map(|&seed| (cell.run)(&ctx, seed)).collect::<Result<Vec<_>, _>>()?;
        write_rows(&dir.join("cell.csv"), &rows)?;
        let marker = Marker {
            cell: cell.id.clone(),
            config_digest: digest.clone(),
            rows_sha256: sha256_hex(&std::fs::read(dir.join("cell.csv"))?),
            finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        std::fs::write(dir.join("done.json"), serde_json::to_vec_pretty(&marker).expect("marker serialises"))?;
        eprintln!("{}: {} done", kind.name(), cell.id);
        results.push((cell.id, rows));
    }
    let summary = summarize(&results);
    write_rows(&kind_dir.join("summary.csv"), &summary)?;
    let by_cell: BTreeMap<&str, Option<f64>> = summary.iter().map(|r| (r.cell.as_str(), r.student_accuracy)).collect();
    for (cell, acc) in by_cell {
        println!("{cell}: student_accuracy={}", acc.map_or("-".into(), |a| format!("{a:.4}")));
    }
    Ok(())
}
