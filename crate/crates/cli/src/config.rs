//! Run configuration: a TOML file supplies defaults, `--set key=value` and
//! the named flags override it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stgin_core::gat::{FcaConfig, DEFAULT_LEAKY_SLOPE};
use stgin_core::informer::InformerConfig;
use stgin_core::synth::SynthConfig;
use stgin_core::train_eval::{TrainConfig, DEFAULT_AR_ORDER};
use stgin_core::ModelDims;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub speeds: Option<PathBuf>,
    pub distances: Option<PathBuf>,
    /// Prebuilt adjacency; takes precedence over `distances`.
    pub adjacency: Option<PathBuf>,
    pub train_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            speeds: None,
            distances: None,
            adjacency: None,
            train_ratio: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Kernel width; the standard deviation of the road lengths when unset.
    pub sigma: Option<f64>,
    /// Distance threshold; derived from `kappa_percentile` when unset.
    pub kappa: Option<f64>,
    pub kappa_percentile: f64,
    /// `false` replaces the road graph with self-loops only.
    pub use_graph: bool,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            sigma: None,
            kappa: None,
            kappa_percentile: 10.0,
            use_graph: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_len: usize,
    pub horizon: usize,
    pub fca: FcaConfig,
    pub gat_heads: usize,
    pub leaky_slope: f64,
    pub informer: InformerConfig,
    pub shared_informer: bool,
    pub relative_to_last: bool,
    pub relative_gain: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_len: 24,
            horizon: 12,
            fca: FcaConfig::default(),
            gat_heads: 4,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            informer: InformerConfig::default(),
            shared_informer: true,
            relative_to_last: true,
            relative_gain: stgin_core::stgin::DEFAULT_RELATIVE_GAIN,
        }
    }
}

impl ModelSection {
    pub fn dims(&self, n_nodes: usize) -> ModelDims {
        ModelDims {
            n_nodes,
            input_len: self.input_len,
            horizon: self.horizon,
            external_channels: 0,
            fca: self.fca,
            gat_heads: self.gat_heads,
            leaky_slope: self.leaky_slope,
            informer: self.informer.clone(),
            shared_informer: self.shared_informer,
            relative_to_last: self.relative_to_last,
            relative_gain: self.relative_gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Nodes whose truth/prediction series are written out.
    pub nodes: Vec<usize>,
    pub ar_order: usize,
    pub baselines: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            nodes: Vec::new(),
            ar_order: DEFAULT_AR_ORDER,
            baselines: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub graph: GraphSection,
    pub model: ModelSection,
    /// `train.seed` also seeds parameter initialisation.
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            graph: GraphSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets a dotted key (`train.iterations`) inside a TOML table.
pub fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides, then
    /// deserializes. Relative paths in the file resolve against its
    /// directory.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_key(&mut table, k, v)?;
        }
        let mut cfg: RunConfig = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.speeds,
            &mut self.data.distances,
            &mut self.data.adjacency,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn require_file(p: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
        let p = p
            .clone()
            .ok_or_else(|| CliError::Config(format!("no {what} path configured")))?;
        if !p.is_file() {
            return Err(CliError::Config(format!(
                "{what} file {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }
}
