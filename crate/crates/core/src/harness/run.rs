use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rl::{save_checkpoint, Algorithm, Trainer};

use super::config::{save_config, ExperimentConfig};
use super::metrics::{read_metrics, summarize, write_summary, MetricsRow, MetricsWriter, SummaryRow, SUMMARY_WINDOW};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn run_dir_name(algorithm: Algorithm, seed: u64) -> String {
    format!("{}-seed{seed}", algorithm.name())
}

/// Result of one (algorithm, seed) cell of the matrix.
#[derive(Debug)]
pub struct RunOutcome {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub dir: PathBuf,
    /// Every row written to the metrics file, including those of a run
    /// that failed part way.
    pub rows: Vec<MetricsRow>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct MatrixReport {
    pub runs: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
    pub summary_path: PathBuf,
}

impl MatrixReport {
    pub fn failures(&self) -> impl Iterator<Item = &RunOutcome> {
        self.runs.iter().filter(|r| r.error.is_some())
    }
}

/// Config written next to a run's checkpoint: the parent config narrowed
/// to this one algorithm and seed.
pub fn run_config(cfg: &ExperimentConfig, algorithm: Algorithm, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.algorithms = vec![algorithm];
    c.seeds = vec![seed];
    c.train.seed = seed;
    c.jobs = 1;
    c
}

/// Trains one algorithm with one seed into `dir`, streaming metrics as
/// episodes finish and writing the checkpoint at the end.
pub fn run_single(cfg: &ExperimentConfig, algorithm: Algorithm, seed: u64, dir: &Path) -> RunOutcome {
    let mut rows = Vec::new();
    let result = (|| -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let cfg = run_config(cfg, algorithm, seed);
        save_config(&dir.join(CONFIG_FILE), &cfg)?;
        let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE))?;
        let mut trainer = Trainer::new(cfg.env.clone(), cfg.train.clone(), algorithm)?;
        trainer.run(|record| {
            let row = MetricsRow::from_record(algorithm, seed, record);
            writer.write(&row)?;
            rows.push(row);
            Ok(())
        })?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), algorithm, &trainer.local)
    })();
    RunOutcome {
        algorithm,
        seed,
        dir: dir.to_path_buf(),
        rows,
        error: result.err().map(|e| e.to_string()),
    }
}

/// Runs every (algorithm, seed) pair on a pool of `cfg.jobs` threads, then
/// writes `summary.csv` over all rows produced.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<MatrixReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let cells: Vec<(Algorithm, u64)> = cfg
        .algorithms
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let runs: Vec<RunOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(a, s)| run_single(cfg, a, s, &cfg.output_dir.join(run_dir_name(a, s))))
            .collect()
    });
    let rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let summary = summarize(&rows, SUMMARY_WINDOW);
    let summary_path = cfg.output_dir.join(SUMMARY_FILE);
    write_summary(&summary_path, &summary)?;
    Ok(MatrixReport {
        runs,
        summary,
        summary_path,
    })
}

/// Every `*/metrics.csv` directly under `dir`, sorted by path.
pub fn metrics_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path().join(METRICS_FILE);
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Recomputes the summary from the metrics files of an output directory.
pub fn summarize_dir(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for f in metrics_files(dir)? {
        rows.extend(read_metrics(&f)?);
    }
    Ok(summarize(&rows, SUMMARY_WINDOW))
}
