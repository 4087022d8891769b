//! The composed forecaster: FCA → per-step GAT → per-node Informer →
//! linear read-out.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, STEP_MINUTES};
use crate::error::{Error, Result};
use crate::gat::{Fca, FcaConfig, GatLayer, DEFAULT_LEAKY_SLOPE};
use crate::graph::RoadGraph;
use crate::informer::{Informer, InformerConfig};
use crate::numerics::init::uniform_fan_in;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_RELATIVE_GAIN: f64 = 20.0;

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub n_nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    #[serde(default)]
    pub external_channels: usize,
    #[serde(default)]
    pub fca: FcaConfig,
    pub gat_heads: usize,
    pub leaky_slope: f64,
    pub informer: InformerConfig,
    /// One Informer shared by all nodes (plus a node embedding) when true;
    /// one per node otherwise.
    pub shared_informer: bool,
    /// Feeds the window relative to each node's last reading and adds that
    /// reading back to the output, so the network predicts the change.
    pub relative_to_last: bool,
    /// Gain on the relative window; the network output is divided by it.
    pub relative_gain: f64,
}

impl ModelDims {
    pub fn new(n_nodes: usize, input_len: usize, horizon: usize) -> Self {
        ModelDims {
            n_nodes,
            input_len,
            horizon,
            external_channels: 0,
            fca: FcaConfig::default(),
            gat_heads: 4,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            informer: InformerConfig::default(),
            shared_informer: true,
            relative_to_last: true,
            relative_gain: DEFAULT_RELATIVE_GAIN,
        }
    }

    pub fn d_model(&self) -> usize {
        self.informer.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.horizon == 0 || self.gat_heads == 0 {
            return Err(Error::Parameter(format!(
                "nodes ({}), horizon ({}) and GAT heads ({}) must be positive",
                self.n_nodes, self.horizon, self.gat_heads
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Parameter(format!(
                "leaky ReLU slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if !(self.relative_gain.is_finite() && self.relative_gain > 0.0) {
            return Err(Error::Parameter(format!(
                "relative gain must be positive and finite, got {}",
                self.relative_gain
            )));
        }
        self.fca.validate()?;
        self.informer.validate()?;
        self.informer.check_lengths(self.input_len)
    }
}

/// Forecast for all nodes, `F′×N`, in normalised units.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub values: Tensor,
    pub horizon_minutes: usize,
}

#[derive(Clone, Debug)]
pub struct StginModel {
    pub dims: ModelDims,
    pub seed: u64,
    pub store: ParamStore,
    pub fca: Fca,
    pub gat: GatLayer,
    pub node_embedding: Option<ParamId>,
    pub informers: Vec<Informer>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl StginModel {
    /// Deterministic initialisation: weights uniform in `±√(1/fan_in)`,
    /// biases zero.
    pub fn init_params(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = dims.d_model();
        let fca = Fca::new(&mut store, "fca", dims.fca, dims.external_channels, &mut rng)?;
        let mut gat = GatLayer::new(
            &mut store,
            "gat",
            dims.fca.out_channels,
            d,
            dims.gat_heads,
            &mut rng,
        )?;
        gat.leaky_slope = dims.leaky_slope;
        let (node_embedding, informers) = if dims.shared_informer {
            let emb = store.add("node_embedding", uniform_fan_in(&mut rng, &[dims.n_nodes, d], d));
            let inf = Informer::new(
                &mut store,
                "informer",
                &dims.informer,
                dims.input_len,
                dims.horizon,
                &mut rng,
            )?;
            (Some(emb), vec![inf])
        } else {
            let infs = (0..dims.n_nodes)
                .map(|n| {
                    Informer::new(
                        &mut store,
                        &format!("informer{n}"),
                        &dims.informer,
                        dims.input_len,
                        dims.horizon,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?;
            (None, infs)
        };
        let out_w = store.add("out.w", uniform_fan_in(&mut rng, &[d, 1], d));
        let out_b = store.add("out.b", Tensor::zeros(&[1]));
        Ok(StginModel {
            dims: dims.clone(),
            seed,
            store,
            fca,
            gat,
            node_embedding,
            informers,
            out_w,
            out_b,
        })
    }

    fn check_inputs(&self, tape: &Tape, speeds: Var, graph: &RoadGraph) -> Result<()> {
        let want = [self.dims.input_len, self.dims.n_nodes];
        if tape.shape(speeds) != want {
            return Err(Error::dim("stgin input window", tape.shape(speeds), &want));
        }
        if graph.n_nodes() != self.dims.n_nodes {
            return Err(Error::Contract(format!(
                "graph has {} nodes, model expects {}",
                graph.n_nodes(),
                self.dims.n_nodes
            )));
        }
        Ok(())
    }

    /// `speeds: E×N` (and optional `externals: E×N×k`) → `F′×N`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        graph: &RoadGraph,
        speeds: Var,
        externals: Option<Var>,
    ) -> Result<Var> {
        self.check_inputs(tape, speeds, graph)?;
        let store = &self.store;
        let (e, n, f, d) = (
            self.dims.input_len,
            self.dims.n_nodes,
            self.dims.horizon,
            self.dims.d_model(),
        );
        let last = if self.dims.relative_to_last {
            let row = tape.slice(speeds, 0, e - 1, 1)?;
            Some(tape.reshape(row, &[n])?)
        } else {
            None
        };
        let x = match last {
            Some(last) => {
                let neg = tape.scale(last, -1.0);
                let rel = tape.add_bcast(speeds, neg)?;
                tape.scale(rel, self.dims.relative_gain)
            }
            None => speeds,
        };
        let feats = self.fca.forward(tape, store, x, externals)?;
        let mut h = self.gat.forward(tape, store, feats, graph)?;
        if let Some(emb) = self.node_embedding {
            let emb = tape.param(store, emb);
            h = tape.add_bcast(h, emb)?;
        }
        let seqs = tape.permute(h, &[1, 0, 2])?;
        let decoded = if let [inf] = self.informers.as_slice() {
            inf.forward(tape, store, seqs)?
        } else {
            let parts = self
                .informers
                .iter()
                .enumerate()
                .map(|(i, inf)| {
                    let x = tape.slice(seqs, 0, i, 1)?;
                    inf.forward(tape, store, x)
                })
                .collect::<Result<Vec<_>>>()?;
            tape.concat(&parts, 0)?
        };
        let w = tape.param(store, self.out_w);
        let b = tape.param(store, self.out_b);
        let y = tape.linear(decoded, w, Some(b))?;
        let y = tape.reshape(y, &[n, f])?;
        debug_assert_eq!(tape.shape(seqs), &[n, e, d]);
        let y = tape.permute(y, &[1, 0])?;
        match last {
            Some(last) => {
                let y = tape.scale(y, 1.0 / self.dims.relative_gain);
                tape.add_bcast(y, last)
            }
            None => Ok(y),
        }
    }

    /// Eager forecast for one window.
    pub fn forward(
        &self,
        window: &Tensor,
        externals: Option<&Tensor>,
        graph: &RoadGraph,
    ) -> Result<Forecast> {
        let mut tape = Tape::new();
        let s = tape.constant(window.clone());
        let ext = externals.map(|x| tape.constant(x.clone()));
        let out = self.forward_tape(&mut tape, graph, s, ext)?;
        let values = tape.value(out).clone();
        if !values.is_finite() {
            return Err(Error::Training {
                update: 0,
                message: "forecast contains non-finite values".into(),
            });
        }
        Ok(Forecast {
            values,
            horizon_minutes: self.dims.horizon * STEP_MINUTES,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.numel()
    }

    pub fn to_checkpoint(&self, normalization: Option<Normalization>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            dims: self.dims.clone(),
            normalization,
            params: self
                .store
                .iter()
                .map(|(_, name, t)| StoredTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut model = Self::init_params(&ck.dims, ck.seed)
            .map_err(|e| Error::Checkpoint(format!("invalid dimensions: {e}")))?;
        if ck.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        for p in &ck.params {
            model.store.load(&p.name, &p.shape, p.data.clone())?;
        }
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "stgin-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter tensor, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint. Tensors are listed in registration order; floats are
/// written in shortest round-trip form, so save → load is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub dims: ModelDims,
    pub normalization: Option<Normalization>,
    pub params: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims(n: usize) -> ModelDims {
        let mut dims = ModelDims::new(n, 8, 2);
        dims.fca.out_channels = 4;
        dims.gat_heads = 2;
        dims.informer = InformerConfig {
            d_model: 8,
            heads: 2,
            encoder_layers: 2,
            replicas: 1,
            ..Default::default()
        };
        dims
    }

    fn window(e: usize, n: usize) -> Tensor {
        let data = (0..e * n).map(|i| 0.5 + 0.3 * (i as f64 * 0.7).sin()).collect();
        Tensor::new(vec![e, n], data).unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let dims = small_dims(3);
        let a = StginModel::init_params(&dims, 7).unwrap();
        let b = StginModel::init_params(&dims, 7).unwrap();
        let c = StginModel::init_params(&dims, 8).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
        let g = RoadGraph::isolated(3);
        let fa = a.forward(&window(8, 3), None, &g).unwrap();
        let fb = b.forward(&window(8, 3), None, &g).unwrap();
        assert_eq!(fa.values.shape(), &[2, 3]);
        assert_eq!(fa.horizon_minutes, 10);
        assert_eq!(fa, fb);
    }

    #[test]
    fn independent_informers() {
        let mut dims = small_dims(2);
        dims.shared_informer = false;
        let m = StginModel::init_params(&dims, 1).unwrap();
        assert_eq!(m.informers.len(), 2);
        assert!(m.node_embedding.is_none());
        let f = m.forward(&window(8, 2), None, &RoadGraph::isolated(2)).unwrap();
        assert_eq!(f.values.shape(), &[2, 2]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = StginModel::init_params(&small_dims(2), 3).unwrap();
        let norm = Normalization { min: 1.5, max: 70.25 };
        let json = m.to_checkpoint(Some(norm)).to_json().unwrap();
        let ck = Checkpoint::from_json(&json).unwrap();
        assert_eq!(ck.normalization, Some(norm));
        let back = StginModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.to_checkpoint(Some(norm)).to_json().unwrap(), json);
    }

    #[test]
    fn mismatches_are_rejected() {
        let m = StginModel::init_params(&small_dims(2), 3).unwrap();
        assert!(m.forward(&window(8, 3), None, &RoadGraph::isolated(3)).is_err());
        assert!(m.forward(&window(8, 2), None, &RoadGraph::isolated(3)).is_err());
        let mut ck = m.to_checkpoint(None);
        ck.params[0].shape = vec![1];
        assert!(matches!(StginModel::from_checkpoint(&ck), Err(Error::Checkpoint(_))));
        let mut bad = small_dims(2);
        bad.input_len = 7;
        assert!(StginModel::init_params(&bad, 0).is_err());
    }
}
