use std::path::Path;

use gsgat::env::Scenario;
use gsgat::harness::{
    emit_plots, load_config, read_metrics, run_matrix, save_config, summarize_dir, ExperimentConfig, MetricsWriter,
    CHECKPOINT_FILE, CONFIG_FILE, CSV_HEADER, METRICS_FILE, SUMMARY_FILE,
};
use gsgat::rl::{restore_checkpoint, Algorithm, QNetwork};
use gsgat::Error;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(Scenario::Gather);
    cfg.env.grid_size = 6;
    cfg.env.num_agents = 3;
    cfg.env.num_food = 3;
    cfg.env.view_size = 3;
    cfg.env.max_steps = 8;
    cfg.train.episodes = 3;
    cfg.train.train_start_episode = 2;
    cfg.train.batch_size = 4;
    cfg.train.network.feature_dim = 8;
    cfg.train.network.heads = 2;
    cfg.train.network.head_dim = 4;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    let mut cfg = tiny(dir.path());
    cfg.algorithms = vec![Algorithm::GsGcn];
    cfg.train.gs.temperature = 0.3;
    save_config(&path, &cfg).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);

    std::fs::write(&path, "# minimal\nenv.scenario = battle\n").unwrap();
    let battle = load_config(&path).unwrap();
    assert_eq!(battle.env.scenario, Scenario::Battle);
    assert_eq!(battle.train.alpha, 0.7);

    std::fs::write(&path, "env.scenario = gather\ntrain.alpha = -1\n").unwrap();
    assert!(matches!(load_config(&path), Err(Error::Validation(_))));
    std::fs::write(&path, "env.scenario = gather\nenv.nope = 1\n").unwrap();
    assert!(matches!(load_config(&path), Err(Error::Config { line: 2, .. })));
}

#[test]
fn matrix_writes_one_directory_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.algorithms = vec![Algorithm::Gat, Algorithm::GsGat];
    cfg.seeds = vec![0, 1, 2];
    cfg.jobs = 2;
    let report = run_matrix(&cfg).unwrap();
    assert_eq!(report.runs.len(), 6);
    assert_eq!(report.failures().count(), 0);
    for run in &report.runs {
        for f in [METRICS_FILE, CHECKPOINT_FILE, CONFIG_FILE] {
            assert!(run.dir.join(f).is_file(), "{} missing in {}", f, run.dir.display());
        }
        let rows = read_metrics(&run.dir.join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.algorithm == run.algorithm && r.seed == run.seed));
        assert!(rows.iter().all(|r| r.live.is_some() && r.kill.is_none()));
        assert_eq!(rows.iter().map(|r| r.episode).collect::<Vec<_>>(), vec![1, 2, 3]);

        // the saved config and checkpoint are enough to rebuild the network
        let saved = load_config(&run.dir.join(CONFIG_FILE)).unwrap();
        assert_eq!(saved.algorithms, vec![run.algorithm]);
        let (_, mut store) = QNetwork::new(run.algorithm, &saved.train, saved.env.obs_dim(), 99).unwrap();
        restore_checkpoint(&run.dir.join(CHECKPOINT_FILE), run.algorithm, &mut store).unwrap();
    }
    assert!(dir.path().join(SUMMARY_FILE).is_file());
    assert_eq!(summarize_dir(dir.path()).unwrap(), report.summary);
    assert_eq!(report.summary.len(), 2);
    assert!(report.summary.iter().all(|s| s.seeds == 3));
}

#[test]
fn failed_run_does_not_stop_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.algorithms = vec![Algorithm::Gcn];
    cfg.seeds = vec![0, 1];
    // a file where the run directory should go
    std::fs::write(dir.path().join("GCN-seed0"), "blocked").unwrap();
    let report = run_matrix(&cfg).unwrap();
    let failed: Vec<_> = report.failures().map(|r| r.seed).collect();
    assert_eq!(failed, vec![0]);
    assert_eq!(report.runs[1].rows.len(), 3);
    assert_eq!(report.summary[0].seeds, 1);
}

#[test]
fn plots_follow_the_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.algorithms = vec![Algorithm::Gcn, Algorithm::GsGcn, Algorithm::Gat];
    cfg.seeds = vec![3];
    run_matrix(&cfg).unwrap();
    let report = emit_plots(dir.path()).unwrap();
    let names: Vec<String> = report
        .files
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["gather.svg", "gather-GCN-vs-GS-GCN.svg"]);
    // GAT has no GS partner in this set
    assert_eq!(report.warnings.len(), 1);
    let svg = std::fs::read_to_string(&report.files[0]).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert_eq!(svg.matches("<polygon").count(), 3);
}

#[test]
fn empty_metrics_give_a_warning_and_no_chart() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("GAT-seed0");
    std::fs::create_dir_all(&run).unwrap();
    MetricsWriter::create(&run.join(METRICS_FILE)).unwrap();
    let text = std::fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert_eq!(text.trim_end(), CSV_HEADER.join(","));
    let report = emit_plots(dir.path()).unwrap();
    assert!(report.files.is_empty());
    assert!(!report.warnings.is_empty());
    assert!(!dir.path().join("plots").exists());
}
