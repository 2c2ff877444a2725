use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gsgat::harness::{
    emit_plots, load_config, run_matrix, verify_suite, ExperimentConfig, Level, CONFIG_FILE,
};
use gsgat::rl::{restore_checkpoint, Policy, Trainer};
use gsgat::Error;

const EXIT_RUN_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "gsgat", version, about = "Train and evaluate graph Q-learning agents on gridworld battles")]
struct Cli {
    /// Root that relative output directories are resolved against.
    #[arg(long, env = "GSGAT_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm and seed listed in a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        /// Overrides run.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical checks and, at full level, the training experiments.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: LevelArg,
    },
    /// Write SVG learning curves for the runs under a directory.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Play greedy episodes with a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        /// Defaults to the config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
    },
}

fn resolve(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn config_exit(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config { .. } | Error::Validation(_) => ExitCode::from(EXIT_CONFIG),
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_RUN_FAILURE),
    }
}

fn train(root: &Option<PathBuf>, config: &Path, jobs: Option<usize>, out: Option<PathBuf>) -> ExitCode {
    let mut cfg: ExperimentConfig = match load_config(config) {
        Ok(c) => c,
        Err(e) => return config_exit(&e),
    };
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    cfg.output_dir = resolve(root, &out.unwrap_or(cfg.output_dir.clone()));
    if let Err(e) = cfg.validate() {
        return config_exit(&e);
    }
    let report = match run_matrix(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUN_FAILURE);
        }
    };
    for run in &report.runs {
        match &run.error {
            None => println!("{} seed {}: {} episodes", run.algorithm, run.seed, run.rows.len()),
            Some(e) => eprintln!("{} seed {} failed after {} episodes: {e}", run.algorithm, run.seed, run.rows.len()),
        }
    }
    for s in &report.summary {
        let f = s.fields();
        println!("{}", f.join(" "));
    }
    println!("summary written to {}", report.summary_path.display());
    if report.failures().next().is_some() {
        ExitCode::from(EXIT_RUN_FAILURE)
    } else {
        ExitCode::SUCCESS
    }
}

fn verify(root: &Option<PathBuf>, level: LevelArg) -> ExitCode {
    let level = match level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let scratch = resolve(root, Path::new("verify"));
    let report = verify_suite(level, &scratch);
    for c in &report.checks {
        println!("{c}");
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY)
    }
}

fn plot(root: &Option<PathBuf>, input: &Path) -> ExitCode {
    match emit_plots(&resolve(root, input)) {
        Ok(r) => {
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            for f in &r.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUN_FAILURE)
        }
    }
}

fn eval(checkpoint: &Path, episodes: usize, config: Option<PathBuf>, epsilon: f64) -> ExitCode {
    let config = config.unwrap_or_else(|| checkpoint.with_file_name(CONFIG_FILE));
    let cfg = match load_config(&config) {
        Ok(c) => c,
        Err(e) => return config_exit(&e),
    };
    let ckpt = match gsgat::rl::load_checkpoint(checkpoint) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUN_FAILURE);
        }
    };
    let result = (|| -> gsgat::Result<()> {
        let mut trainer = Trainer::new(cfg.env.clone(), cfg.train.clone(), ckpt.algorithm)?;
        restore_checkpoint(checkpoint, ckpt.algorithm, &mut trainer.local)?;
        let mut total = 0.0;
        for ep in 1..=episodes {
            // episodes past the training range so evaluation maps differ from training ones
            let r = trainer.run_episode(cfg.train.episodes + ep, Policy::Evaluate { epsilon })?;
            println!(
                "episode {ep}: mean reward {:.3}, {} {}, death {}, ratio {}",
                r.mean_reward,
                match r.metrics.kind {
                    gsgat::env::MetricsKind::LiveDeath => "live",
                    gsgat::env::MetricsKind::KillDeath => "kill",
                },
                r.metrics.primary,
                r.metrics.death,
                r.metrics.ratio
            );
            total += r.mean_reward;
        }
        println!("{}: mean reward over {episodes} episodes {:.3}", ckpt.algorithm, total / episodes.max(1) as f64);
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUN_FAILURE)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, jobs, out } => train(&cli.output_root, &config, jobs, out),
        Command::Verify { level } => verify(&cli.output_root, level),
        Command::Plot { input } => plot(&cli.output_root, &input),
        Command::Eval {
            checkpoint,
            episodes,
            config,
            epsilon,
        } => eval(&checkpoint, episodes, config, epsilon),
    }
}
