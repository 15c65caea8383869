//! `synthkd`: train the diffusion generator, generate synthetic datasets,
//! train teachers, distill students, evaluate and run sweeps.

mod commands;
mod config;
mod error;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use synthkd::nets::Tier;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "synthkd", version, about = "Synthetic-data knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional denoiser on the toy training split.
    TrainDiffusion {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with classifier-free guidance.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Guidance scale (1 disables guidance).
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on the real toy training split.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tier: Option<Tier>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a student from a teacher on a synthetic dataset.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student_tier: Option<Tier>,
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        soft: Option<f64>,
        #[arg(long)]
        hard: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracy, mean confidence and distribution variance.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// `test`, `train` or the path of a synthetic dataset.
        #[arg(long, default_value = "test")]
        dataset: String,
        /// Also write the numbers as a metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment grid, one CSV per cell plus a summary.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Fidelity,
    Capacity,
    Temperature,
    Labels,
    Diversity,
    Scale,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Fidelity => "fidelity",
            SweepKind::Capacity => "capacity",
            SweepKind::Temperature => "temperature",
            SweepKind::Labels => "labels",
            SweepKind::Diversity => "diversity",
            SweepKind::Scale => "scale",
        }
    }
}

/// Worker cap from `SYNTHKD_THREADS`, defaulting to the available cores.
fn workers() -> Result<usize, CliError> {
    match std::env::var("SYNTHKD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("SYNTHKD_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = workers()?;
    // Caps evaluation parallelism too; ignore the error if a pool exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    match cli.command {
        Command::TrainDiffusion { config, out } => {
            commands::train_diffusion(&RunConfig::load(config.as_deref())?, &out)
        }
        Command::GenData { config, checkpoint, s, steps, per_class, seed, out } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            let g = &mut cfg.gen;
            g.guidance_scale = s.unwrap_or(g.guidance_scale);
            g.sampling_steps = steps.unwrap_or(g.sampling_steps);
            g.per_class_count = per_class.unwrap_or(g.per_class_count);
            g.seed = seed.unwrap_or(g.seed);
            commands::gen_data(&cfg, &checkpoint, &out, workers)
        }
        Command::TrainTeacher { config, tier, out } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.teacher.tier = tier.unwrap_or(cfg.teacher.tier);
            commands::train_teacher(&cfg, &out)
        }
        Command::Distill { config, teacher, student_tier, synthetic, tau, soft, hard, out } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.student.tier = student_tier.unwrap_or(cfg.student.tier);
            let d = &mut cfg.distill;
            d.tau = tau.unwrap_or(d.tau);
            d.soft_weight = soft.unwrap_or(d.soft_weight);
            d.hard_weight = hard.unwrap_or(d.hard_weight);
            commands::distill(&cfg, &teacher, &synthetic, &out)
        }
        Command::Eval { config, model, dataset, out } => {
            commands::eval(&RunConfig::load(config.as_deref())?, &model, &dataset, out.as_deref())
        }
        Command::Sweep { kind, config, denoiser, teacher, out_dir } => {
            sweep::run(kind, &RunConfig::load(config.as_deref())?, &denoiser, &teacher, &out_dir, workers)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
