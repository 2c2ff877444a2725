//! Experiment configs, ablation matrix runs, metrics files, charts and the
//! verification suite.

mod config;
mod metrics;
mod plot;
mod run;
pub mod verify;

pub use config::{load_config, parse_config, save_config, ExperimentConfig, KEYS};
pub use metrics::{
    deterministic_columns, read_metrics, summarize, write_summary, MetricsRow, MetricsWriter, SummaryRow,
    CSV_HEADER, SUMMARY_HEADER, SUMMARY_WINDOW, WALL_CLOCK_COLUMN,
};
pub use plot::{emit_plots, learning_curve, render_svg, CurvePoint, PlotReport};
pub use run::{
    metrics_files, run_config, run_dir_name, run_matrix, run_single, summarize_dir, MatrixReport, RunOutcome,
    CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE,
};
pub use verify::{verify_suite, Check, Level, VerifyReport};
