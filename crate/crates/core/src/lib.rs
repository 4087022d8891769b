//! Spatio-temporal traffic speed forecasting: a graph attention layer over
//! the road network feeding per-node sparse-attention sequence models.

pub mod data;
pub mod error;
pub mod gat;
pub mod graph;
pub mod informer;
pub mod numerics;
pub mod stgin;
pub mod synth;
pub mod train_eval;

pub use data::{Normalization, SampleWindow, SpeedDataset};
pub use error::{Error, Result};
pub use gat::{FcaConfig, GatLayer};
pub use graph::RoadGraph;
pub use informer::{Informer, InformerConfig};
pub use numerics::{ParamId, ParamStore, Tape, Tensor, Var};
pub use stgin::{Checkpoint, Forecast, ModelDims, StginModel};
pub use train_eval::{EvalReport, Forecaster, TrainConfig};
