use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmlab::commands::{self, EditTask};
use cmlab::config::RunConfig;
use cmlab::runner::{self, RunPaths, TrainKind};
use cmlab::theory::{Check, TheoryOptions};
use cmlab::{LabError, Result};

/// Consistency models at desk scale.
#[derive(Debug, Parser)]
#[command(name = "cmlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of training iterations.
    #[arg(long)]
    steps: Option<u64>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Denoising score matching (teacher for distillation).
    TrainScore(TrainArgs),
    /// Consistency distillation.
    Distill(TrainArgs),
    /// Consistency training.
    TrainCt(TrainArgs),
    /// One-step generation.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Multistep generation with configured or searched time points.
    Multistep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Zero-shot editing of an image.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: EditTask,
        /// PPM or .cmt image; a procedural image when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Distances between two point clouds, or one cloud and fresh data.
    Eval {
        a: PathBuf,
        b: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Writes the closed-form model of a single-Gaussian dataset.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Runs the theory checks.
    VerifyTheory {
        /// Comma-separated check names or numbers.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training iterations for the distillation fidelity check.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn train(kind: TrainKind, args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    let paths = RunPaths::new(&cfg.output_dir);
    let outcome = runner::train(kind, &cfg, args.checkpoint.as_deref(), &paths)?;
    println!("{} iterations, checkpoint {}", outcome.iteration, outcome.checkpoint.display());
    Ok(())
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainScore(a) => train(TrainKind::Score, a),
        Command::Distill(a) => train(TrainKind::Distill, a),
        Command::TrainCt(a) => train(TrainKind::Ct, a),
        Command::Sample { checkpoint, count, seed, out } => {
            ensure_dir(&out)?;
            print_paths(&commands::sample(&checkpoint, count, seed, &out)?);
            Ok(())
        }
        Command::Multistep { checkpoint, steps, count, seed, out } => {
            ensure_dir(&out)?;
            print_paths(&commands::multistep(&checkpoint, steps, count, seed, &out)?);
            Ok(())
        }
        Command::Edit { checkpoint, task, input, seed, out } => {
            ensure_dir(&out)?;
            let s = commands::edit_command(&checkpoint, task, input.as_deref(), seed, &out)?;
            println!("{} constrained coordinates, {} violations", s.constrained, s.violations);
            Ok(())
        }
        Command::Eval { a, b, config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            ensure_dir(&out)?;
            let r = commands::eval(&a, b.as_deref(), &cfg, seed, &out)?;
            println!(
                "sliced_wasserstein {} mmd_rbf {} energy_distance {}",
                r.sliced_wasserstein, r.mmd_rbf, r.energy_distance
            );
            Ok(())
        }
        Command::Oracle { config, out } => {
            let cfg = load_config(config.as_deref())?;
            ensure_dir(&out)?;
            println!("{}", commands::oracle(&cfg, &out)?.display());
            Ok(())
        }
        Command::VerifyTheory { only, seed, steps, out } => {
            let checks = match only {
                Some(list) => Check::parse_list(&list)?,
                None => Check::ALL.to_vec(),
            };
            let mut opts = TheoryOptions { seed, ..TheoryOptions::default() };
            if let Some(steps) = steps {
                opts.cd_steps = steps;
            }
            ensure_dir(&out)?;
            let report = commands::verify_theory(&checks, &opts, &out)?;
            let failed = report.checks.iter().filter(|c| !c.passed).count();
            if failed == 0 {
                Ok(())
            } else {
                Err(LabError::ChecksFailed { failed })
            }
        }
    }
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("CMLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
