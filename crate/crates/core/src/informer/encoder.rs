//! Distilling encoder with halving replicas.

use rand::Rng;

use super::attention::{AttentionKind, AttentionParams};
use super::blocks::{residual_norm, FeedForward, LayerNorm};
use crate::error::{Error, Result};
use crate::numerics::init::uniform_fan_in;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DISTILL_WIDTH: usize = 3;

/// Self-attention followed by a position-wise feed-forward block, each with a
/// residual connection and layer normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: AttentionParams::new(store, &format!("{prefix}.attn"), d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d_model),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), d_model, ff_hidden, rng),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d_model),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        kind: AttentionKind,
    ) -> Result<Var> {
        let a = self.attn.forward(tape, store, x, x, kind, false)?;
        let x = residual_norm(tape, store, &self.norm1, x, a)?;
        let f = self.ff.forward(tape, store, x)?;
        residual_norm(tape, store, &self.norm2, x, f)
    }
}

/// Conv1d (width 3, same padding) → ELU → MaxPool(3, 2, 1): halves the
/// time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Distill {
    pub kernels: ParamId,
    pub bias: ParamId,
}

impl Distill {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        Distill {
            kernels: store.add(
                format!("{prefix}.kernels"),
                uniform_fan_in(rng, &[d_model, d_model, DISTILL_WIDTH], d_model * DISTILL_WIDTH),
            ),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d_model])),
        }
    }

    /// `x: B×L×d` with even `L` → `B×(L/2)×d`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let len = tape.shape(x).get(1).copied().unwrap_or(0);
        if len < 2 || len % 2 != 0 {
            return Err(Error::Contract(format!(
                "distilling needs an even length of at least 2, got {len}"
            )));
        }
        let k = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        let c = tape.conv1d(x, k)?;
        let c = tape.add_bcast(c, b)?;
        let c = tape.elu(c);
        tape.maxpool1d(c, 3, 2, 1)
    }
}

/// Eager distilling of a single `L×d` series.
pub fn distill(store: &ParamStore, stage: &Distill, x: &Tensor) -> Result<Tensor> {
    let [l, d] = *x.shape() else {
        return Err(Error::dim("distill", x.shape(), &[]));
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, l, d])?);
    let out = stage.forward(&mut tape, store, xv)?;
    let s = tape.shape(out).to_vec();
    tape.value(out).clone().reshape(&s[1..])
}

/// Attention layers interleaved with distilling stages.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBranch {
    pub layers: Vec<EncoderLayer>,
    pub distills: Vec<Distill>,
}

impl EncoderBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        let mut distills = Vec::with_capacity(n_layers.saturating_sub(1));
        for i in 0..n_layers {
            layers.push(EncoderLayer::new(
                store,
                &format!("{prefix}.layer{i}"),
                d_model,
                heads,
                ff_hidden,
                rng,
            )?);
            if i + 1 < n_layers {
                distills.push(Distill::new(store, &format!("{prefix}.distill{i}"), d_model, rng));
            }
        }
        Ok(EncoderBranch { layers, distills })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut x: Var,
        kind: AttentionKind,
    ) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x, kind)?;
            if let Some(d) = self.distills.get(i) {
                x = d.forward(tape, store, x)?;
            }
        }
        Ok(x)
    }
}

/// Main branch plus halving replicas; replica `r` reads the trailing
/// `L/2^r` steps through `layers − r` attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub main: EncoderBranch,
    pub replicas: Vec<EncoderBranch>,
}

impl EncoderStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_layers: usize,
        n_replicas: usize,
        d_model: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Parameter("encoder needs at least one layer".into()));
        }
        if n_replicas >= n_layers {
            return Err(Error::Parameter(format!(
                "{n_replicas} replicas need at least {} attention layers, got {n_layers}",
                n_replicas + 1
            )));
        }
        let main = EncoderBranch::new(
            store,
            &format!("{prefix}.main"),
            n_layers,
            d_model,
            heads,
            ff_hidden,
            rng,
        )?;
        let replicas = (1..=n_replicas)
            .map(|r| {
                EncoderBranch::new(
                    store,
                    &format!("{prefix}.replica{r}"),
                    n_layers - r,
                    d_model,
                    heads,
                    ff_hidden,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(EncoderStack { main, replicas })
    }

    pub fn n_layers(&self) -> usize {
        self.main.layers.len()
    }

    /// Time length of the concatenated feature map for an input of `len`.
    pub fn feature_len(&self, len: usize) -> usize {
        let per_branch = len >> (self.n_layers() - 1);
        per_branch * (1 + self.replicas.len())
    }

    /// `x: B×L×d` → feature map `B×L_fm×d`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        kind: AttentionKind,
    ) -> Result<Var> {
        let len = tape.shape(x).get(1).copied().unwrap_or(0);
        let div = 1usize << (self.n_layers() - 1);
        if len == 0 || len % div != 0 || (div > 1 && len / div == 0) {
            return Err(Error::Contract(format!(
                "input length {len} must be a positive multiple of {div}"
            )));
        }
        let mut outputs = vec![self.main.forward(tape, store, x, kind)?];
        for (r, branch) in self.replicas.iter().enumerate() {
            let part = len >> (r + 1);
            let tail = tape.slice(x, 1, len - part, part)?;
            outputs.push(branch.forward(tape, store, tail, kind)?);
        }
        if outputs.len() == 1 {
            Ok(outputs[0])
        } else {
            tape.concat(&outputs, 1)
        }
    }
}
