use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use stgin_cli::{commands, CliError, RunConfig};
use stgin_core::graph::{read_matrix_csv, write_matrix_csv};
use stgin_core::synth::SynthConfig;
use stgin_core::{Error, Tensor};

fn stgin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stgin"))
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Synthetic data for `nodes` nodes in `dir/data`, optionally cut to `steps` rows.
fn synth_data(dir: &Path, nodes: usize, days: usize, steps: Option<usize>) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.join("data");
    cfg.synth = SynthConfig {
        nodes,
        days,
        seed: 3,
        ..SynthConfig::default()
    };
    commands::synth(&cfg).unwrap();
    let speeds = cfg.output_dir.join(commands::SPEEDS_FILE);
    if let Some(t) = steps {
        let m = read_speeds(&speeds);
        let cut = Tensor::new(vec![t, nodes], m.data()[..t * nodes].to_vec()).unwrap();
        write_matrix_csv(&speeds, &cut).unwrap();
    }
    cfg.data.speeds = Some(speeds);
    cfg.data.distances = Some(cfg.output_dir.join(commands::DISTANCES_FILE));
    // Two nodes have a single road length, which has no spread.
    cfg.graph.sigma = Some(1.0);
    cfg
}

fn read_speeds(path: &Path) -> Tensor {
    stgin_core::data::load_speed_csv(path).unwrap().matrix
}

fn quick_train(cfg: &mut RunConfig, out: PathBuf, horizon: usize) {
    cfg.output_dir = out;
    cfg.model.input_len = 12;
    cfg.model.horizon = horizon;
    cfg.train.iterations = 3;
    cfg.train.batch_size = 4;
}

#[test]
fn singleton_distance_file_gives_unit_adjacency() {
    let tmp = tempfile::tempdir().unwrap();
    let dist = tmp.path().join("d.csv");
    std::fs::write(&dist, "0\n").unwrap();
    let status = stgin()
        .args(["build-graph", "--distances"])
        .arg(&dist)
        .arg("-o")
        .arg(tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    let adj = read_matrix_csv(&tmp.path().join(commands::ADJACENCY_FILE)).unwrap();
    assert_eq!(adj.shape(), [1, 1]);
    assert_eq!(adj.data(), [1.0]);
}

#[test]
fn zero_percentile_keeps_only_the_diagonal() {
    let tmp = tempfile::tempdir().unwrap();
    let dist = tmp.path().join("d.csv");
    std::fs::write(&dist, "0,1,2\n1,0,1\n2,1,0\n").unwrap();
    let mut cfg = RunConfig::default();
    cfg.output_dir = tmp.path().to_path_buf();
    cfg.data.distances = Some(dist);
    cfg.graph.kappa_percentile = 0.0;
    let summary = commands::build_graph(&cfg).unwrap();
    assert_eq!(summary.edge_count, 0);
    let adj = read_matrix_csv(&tmp.path().join(commands::ADJACENCY_FILE)).unwrap();
    assert_eq!(adj, Tensor::eye(3));
}

#[test]
fn synth_two_nodes_two_days_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let dir = tmp.path().join(out);
        let status = stgin()
            .args(["synth", "--nodes", "2", "--days", "2", "--seed", "17", "-o"])
            .arg(&dir)
            .status()
            .unwrap();
        assert!(status.success());
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let speeds = read_speeds(&a.join(commands::SPEEDS_FILE));
    assert_eq!(speeds.shape(), [576, 2]);
    for f in [commands::SPEEDS_FILE, commands::DISTANCES_FILE, commands::SYNTH_PARAMS_FILE] {
        assert_eq!(digest(&a.join(f)), digest(&b.join(f)), "{f}");
    }
}

#[test]
fn missing_speeds_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stgin()
        .args(["train", "--speeds"])
        .arg(tmp.path().join("nope.csv"))
        .arg("-o")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn ragged_speed_file_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let speeds = tmp.path().join("s.csv");
    std::fs::write(&speeds, "1,2\n3\n").unwrap();
    let out = stgin()
        .args(["train", "--no-graph", "--speeds"])
        .arg(&speeds)
        .arg("-o")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn equal_road_lengths_need_an_explicit_sigma() {
    let tmp = tempfile::tempdir().unwrap();
    let dist = tmp.path().join("d.csv");
    std::fs::write(&dist, "0,2\n2,0\n").unwrap();
    let mut cfg = RunConfig::default();
    cfg.output_dir = tmp.path().to_path_buf();
    cfg.data.distances = Some(dist);
    let err = commands::build_graph(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    cfg.graph.sigma = Some(2.0);
    let summary = commands::build_graph(&cfg).unwrap();
    assert_eq!(summary.edge_count, 0);
}

#[test]
fn unknown_config_key_is_rejected() {
    let out = stgin()
        .args(["build-graph", "--set", "graph.kapa=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_numerical_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_data(tmp.path(), 2, 1, None);
    let out = stgin()
        .args(["train", "--input-len", "12", "--horizon", "3", "--iterations", "20"])
        .args(["--batch-size", "4", "--learning-rate", "1e300", "--set", "graph.sigma=1.0"])
        .arg("--speeds")
        .arg(cfg.data.speeds.as_ref().unwrap())
        .arg("--distances")
        .arg(cfg.data.distances.as_ref().unwrap())
        .arg("-o")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp
        .path()
        .join("run")
        .join(commands::LAST_FINITE_CHECKPOINT_FILE)
        .is_file());
}

#[test]
fn out_of_range_node_is_a_parameter_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synth_data(tmp.path(), 2, 1, None);
    quick_train(&mut cfg, tmp.path().join("run"), 3);
    commands::train(&cfg).unwrap();
    cfg.evaluate.nodes = vec![0, 2];
    let ck = cfg.output_dir.join(commands::CHECKPOINT_FILE);
    let err = commands::evaluate(&cfg, &ck, None).unwrap_err();
    assert!(matches!(err, CliError::Core(Error::Parameter(_))), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checkpoint_dims_must_match_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synth_data(tmp.path(), 2, 1, None);
    quick_train(&mut cfg, tmp.path().join("run"), 3);
    commands::train(&cfg).unwrap();
    let ck = cfg.output_dir.join(commands::CHECKPOINT_FILE);
    cfg.model.horizon = 6;
    let err = commands::evaluate(&cfg, &ck, None).unwrap_err();
    assert!(matches!(err, CliError::Core(Error::Checkpoint(_))), "{err}");
}

#[test]
fn twelve_step_horizon_reports_four_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synth_data(tmp.path(), 2, 1, None);
    quick_train(&mut cfg, tmp.path().join("run"), 12);
    commands::train(&cfg).unwrap();
    cfg.evaluate.nodes = vec![1];
    let ck = cfg.output_dir.join(commands::CHECKPOINT_FILE);
    let report = commands::evaluate(&cfg, &ck, None).unwrap();

    let csv = std::fs::read_to_string(cfg.output_dir.join(commands::METRICS_CSV_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("dataset,horizon_min,method,scale,mae,rmse,accuracy")
    );
    let mut horizons: Vec<usize> = report.rows.iter().map(|r| r.horizon_min).collect();
    horizons.dedup();
    horizons.sort_unstable();
    horizons.dedup();
    assert_eq!(horizons, [15, 30, 45, 60]);
    assert_eq!(lines.count(), report.rows.len());
    for h in [15, 30, 45, 60] {
        // One row per method and scale at every horizon.
        assert_eq!(report.rows.iter().filter(|r| r.horizon_min == h).count(), 4 * 2);
        let series = cfg
            .output_dir
            .join(commands::PREDICTIONS_DIR)
            .join(format!("node1_{h}min.csv"));
        let text = std::fs::read_to_string(series).unwrap();
        assert!(text.starts_with("step,timestamp_min,truth,prediction\n"));
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synth_data(tmp.path(), 3, 1, None);
    quick_train(&mut cfg, tmp.path().join("first"), 3);
    cfg.train.seed = 21;
    commands::train(&cfg).unwrap();
    let echo = cfg.output_dir.join(commands::CONFIG_ECHO_FILE);
    let second = tmp.path().join("second");
    let status = stgin()
        .args(["train", "--config"])
        .arg(&echo)
        .arg("-o")
        .arg(&second)
        .status()
        .unwrap();
    assert!(status.success());
    for f in [commands::CHECKPOINT_FILE, commands::LOSS_FILE] {
        assert_eq!(digest(&cfg.output_dir.join(f)), digest(&second.join(f)), "{f}");
    }
    let reread = RunConfig::load(Some(&echo), &[]).unwrap();
    assert_eq!(reread.train, cfg.train);
    assert_eq!(reread.model, cfg.model);
}

#[test]
fn toy_run_trains_within_five_minutes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synth_data(tmp.path(), 2, 1, Some(200));
    cfg.output_dir = tmp.path().join("run");
    cfg.model.input_len = 12;
    cfg.model.horizon = 3;
    let start = Instant::now();
    let out = commands::train(&cfg).unwrap();
    assert!(start.elapsed() < Duration::from_secs(300));
    assert_eq!(out.loss_trace.len(), 500);
    assert!(out.loss_trace.iter().all(|l| l.is_finite()));
    let loss = std::fs::read_to_string(cfg.output_dir.join(commands::LOSS_FILE)).unwrap();
    assert_eq!(loss.lines().count(), 501);
}
