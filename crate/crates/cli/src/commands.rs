use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use stgin_core::data::{self, load_speed_csv, STEP_MINUTES};
use stgin_core::graph::{
    kappa_from_percentile, read_matrix_csv, sigma_from_distances, write_matrix_csv,
};
use stgin_core::synth::{self, SynthParams};
use stgin_core::train_eval::{
    self, horizons_for, node_series, predict_all, score, EvalReport, Forecaster,
    HistoricalAverage, LinearAr, Persistence, StginForecaster,
};
use stgin_core::{Checkpoint, Error, RoadGraph, StginModel, Tensor};

use crate::config::{GraphSection, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_FINITE_CHECKPOINT_FILE: &str = "checkpoint_last_finite.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const GRAPH_SUMMARY_FILE: &str = "graph_summary.json";
pub const SPEEDS_FILE: &str = "speeds.csv";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const SYNTH_PARAMS_FILE: &str = "synth_params.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const METRICS_LOG_FILE: &str = "metrics.log";
pub const PREDICTIONS_DIR: &str = "predictions";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub n_nodes: usize,
    pub edge_count: usize,
    pub sigma: f64,
    pub kappa: f64,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io {
        path: dir.display().to_string(),
        source: e,
    }))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Core(Error::Io {
        path: path.display().to_string(),
        source: e,
    }))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Kernel graph for a road-length matrix. A single node has no pairs to
/// derive σ or κ from; both then default to 1. Equal road lengths give no
/// σ, which must then be configured.
pub fn graph_from_distances(distances: &Tensor, g: &GraphSection) -> Result<RoadGraph, CliError> {
    let n = distances.shape().first().copied().unwrap_or(0);
    let sigma = match g.sigma {
        Some(s) => s,
        None if n < 2 => 1.0,
        None => match sigma_from_distances(distances)? {
            s if s > 0.0 => s,
            _ => {
                return Err(CliError::Config(
                    "road lengths have zero spread, so sigma cannot be derived; set graph.sigma".into(),
                ))
            }
        },
    };
    let kappa = match g.kappa {
        Some(k) => k,
        None if n < 2 => 1.0,
        None => kappa_from_percentile(distances, g.kappa_percentile)?,
    };
    Ok(RoadGraph::build_adjacency(distances, sigma, kappa)?)
}

/// The configured road graph, or self-loops only when the graph is
/// disabled.
pub fn load_graph(cfg: &RunConfig, n_nodes: usize) -> Result<RoadGraph, CliError> {
    if !cfg.graph.use_graph {
        return Ok(RoadGraph::isolated(n_nodes));
    }
    let graph = if cfg.data.adjacency.is_some() {
        let p = RunConfig::require_file(&cfg.data.adjacency, "adjacency")?;
        RoadGraph::load_prebuilt_adjacency(p)?
    } else {
        let p = RunConfig::require_file(&cfg.data.distances, "distances")?;
        graph_from_distances(&read_matrix_csv(&p)?, &cfg.graph)?
    };
    if graph.n_nodes() != n_nodes {
        return Err(CliError::Core(Error::Validation(format!(
            "graph has {} nodes but the speed data has {n_nodes}",
            graph.n_nodes()
        ))));
    }
    Ok(graph)
}

pub fn build_graph(cfg: &RunConfig) -> Result<GraphSummary, CliError> {
    let p = RunConfig::require_file(&cfg.data.distances, "distances")?;
    let graph = graph_from_distances(&read_matrix_csv(&p)?, &cfg.graph)?;
    create_dir(&cfg.output_dir)?;
    graph.write_adjacency_csv(cfg.output_dir.join(ADJACENCY_FILE))?;
    let summary = GraphSummary {
        n_nodes: graph.n_nodes(),
        edge_count: graph.edge_count(),
        sigma: graph.sigma(),
        kappa: graph.kappa(),
    };
    write_text(&cfg.output_dir.join(GRAPH_SUMMARY_FILE), &to_json(&summary)?)?;
    info!(
        "graph: {} nodes, {} edges, sigma {}, kappa {}",
        summary.n_nodes, summary.edge_count, summary.sigma, summary.kappa
    );
    Ok(summary)
}

pub fn synth(cfg: &RunConfig) -> Result<SynthParams, CliError> {
    let d = synth::generate(&cfg.synth)?;
    create_dir(&cfg.output_dir)?;
    write_matrix_csv(cfg.output_dir.join(SPEEDS_FILE), &d.speeds.matrix)?;
    write_matrix_csv(cfg.output_dir.join(DISTANCES_FILE), &d.distances)?;
    write_text(&cfg.output_dir.join(SYNTH_PARAMS_FILE), &to_json(&d.params)?)?;
    info!(
        "synthetic data: {} steps x {} nodes in {}",
        d.params.steps,
        cfg.synth.nodes,
        cfg.output_dir.display()
    );
    Ok(d.params)
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub loss_trace: Vec<f64>,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutput, CliError> {
    let speeds = RunConfig::require_file(&cfg.data.speeds, "speeds")?;
    let ds = load_speed_csv(&speeds)?;
    let graph = load_graph(cfg, ds.n_nodes())?;
    let dims = cfg.model.dims(ds.n_nodes());
    let mut model = StginModel::init_params(&dims, cfg.train.seed)?;
    let prep = data::prepare(
        &ds,
        cfg.model.input_len,
        cfg.model.horizon,
        cfg.data.train_ratio,
    )?;
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(CONFIG_ECHO_FILE), &cfg.to_toml()?)?;
    info!(
        "{}: {} train / {} test windows, {} parameters",
        ds.name,
        prep.train.len(),
        prep.test.len(),
        model.num_parameters()
    );
    match train_eval::train(&mut model, &graph, &prep.train, &cfg.train) {
        Ok(trace) => {
            let checkpoint = model.to_checkpoint(Some(prep.normalization));
            checkpoint.save(cfg.output_dir.join(CHECKPOINT_FILE))?;
            train_eval::write_loss_csv(cfg.output_dir.join(LOSS_FILE), &trace)?;
            Ok(TrainOutput {
                checkpoint,
                loss_trace: trace,
            })
        }
        Err(e @ Error::Training { .. }) => {
            let path = cfg.output_dir.join(LAST_FINITE_CHECKPOINT_FILE);
            model.to_checkpoint(Some(prep.normalization)).save(&path)?;
            warn!("last finite parameters saved to {}", path.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn check_dims(ck: &Checkpoint, cfg: &RunConfig, n_nodes: usize) -> Result<(), CliError> {
    let d = &ck.dims;
    if d.n_nodes != n_nodes || d.input_len != cfg.model.input_len || d.horizon != cfg.model.horizon
    {
        return Err(CliError::Core(Error::Checkpoint(format!(
            "checkpoint is for {} nodes, E={}, F'={}; configuration has {n_nodes} nodes, E={}, F'={}",
            d.n_nodes, d.input_len, d.horizon, cfg.model.input_len, cfg.model.horizon
        ))));
    }
    Ok(())
}

fn write_node_series(
    dir: &Path,
    node: usize,
    horizon_min: usize,
    rows: &[(usize, f64, f64)],
) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("node{node}_{horizon_min}min.csv"));
    let mut out = String::from("step,timestamp_min,truth,prediction\n");
    for (t, y, p) in rows {
        out.push_str(&format!("{t},{},{y},{p}\n", t * STEP_MINUTES));
    }
    write_text(&path, &out)?;
    Ok(path)
}

pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    ablation: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let speeds = RunConfig::require_file(&cfg.data.speeds, "speeds")?;
    let ds = load_speed_csv(&speeds)?;
    let n = ds.n_nodes();
    if let Some(&bad) = cfg.evaluate.nodes.iter().find(|&&j| j >= n) {
        return Err(CliError::Core(Error::Parameter(format!(
            "node index {bad} is out of range for {n} nodes"
        ))));
    }
    let ck = Checkpoint::load(checkpoint)?;
    check_dims(&ck, cfg, n)?;
    let model = StginModel::from_checkpoint(&ck)?;
    let graph = load_graph(cfg, n)?;
    let prep = data::prepare(&ds, cfg.model.input_len, cfg.model.horizon, cfg.data.train_ratio)?;
    if ck.normalization.is_some_and(|nm| nm != prep.normalization) {
        warn!("checkpoint normalization differs from the one fitted on this data");
    }
    let norm = Some(prep.normalization);

    let isolated = RoadGraph::isolated(n);
    let ablation_model = match ablation {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            check_dims(&ck, cfg, n)?;
            Some(StginModel::from_checkpoint(&ck)?)
        }
        None => None,
    };
    let train_rows = Tensor::new(
        vec![prep.boundary, n],
        prep.scaled.matrix.data()[..prep.boundary * n].to_vec(),
    )?;
    let ar = if cfg.evaluate.baselines {
        Some(LinearAr::fit(&train_rows, cfg.evaluate.ar_order)?)
    } else {
        None
    };

    let stgin = StginForecaster {
        name: "stgin".into(),
        model: &model,
        graph: &graph,
    };
    let mut methods: Vec<&dyn Forecaster> = vec![&stgin];
    let no_graph = ablation_model.as_ref().map(|m| StginForecaster {
        name: "stgin_no_graph".into(),
        model: m,
        graph: &isolated,
    });
    if let Some(m) = &no_graph {
        methods.push(m);
    }
    if let Some(ar) = &ar {
        methods.extend([&Persistence as &dyn Forecaster, &HistoricalAverage, ar]);
    }

    let mut report = EvalReport::default();
    let pred_dir = cfg.output_dir.join(PREDICTIONS_DIR);
    create_dir(&cfg.output_dir)?;
    for m in methods {
        let preds = predict_all(m, &prep.test, cfg.model.horizon)?;
        report
            .rows
            .extend(score(&ds.name, m.name(), &prep.test, &preds, norm)?);
        if m.name() == "stgin" && !cfg.evaluate.nodes.is_empty() {
            create_dir(&pred_dir)?;
            for &node in &cfg.evaluate.nodes {
                for h_min in horizons_for(cfg.model.horizon) {
                    let steps = (h_min / STEP_MINUTES).min(cfg.model.horizon);
                    let rows = node_series(&prep.test, &preds, node, steps, norm)?;
                    write_node_series(&pred_dir, node, h_min, &rows)?;
                }
            }
        }
    }
    report.write_csv(cfg.output_dir.join(METRICS_CSV_FILE))?;
    let log = report.to_log();
    write_text(&cfg.output_dir.join(METRICS_LOG_FILE), &log)?;
    for line in log.lines() {
        info!("{line}");
    }
    Ok(report)
}
