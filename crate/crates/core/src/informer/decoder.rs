//! Generative-style decoder: masked self-attention, cross-attention to the
//! encoder feature map, feed-forward.

use rand::Rng;

use super::attention::{AttentionKind, AttentionParams};
use super::blocks::{residual_norm, FeedForward, LayerNorm};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub norm1: LayerNorm,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: AttentionParams::new(store, &format!("{prefix}.self"), d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d_model),
            cross_attn: AttentionParams::new(
                store,
                &format!("{prefix}.cross"),
                d_model,
                heads,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d_model),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), d_model, ff_hidden, rng),
            norm3: LayerNorm::new(store, &format!("{prefix}.norm3"), d_model),
        })
    }

    /// `x: B×L_dec×d`, `memory: B×L_fm×d` → `B×L_dec×d`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        kind: AttentionKind,
    ) -> Result<Var> {
        let a = self.self_attn.forward(tape, store, x, x, kind, true)?;
        let x = residual_norm(tape, store, &self.norm1, x, a)?;
        let c = self
            .cross_attn
            .forward(tape, store, x, memory, AttentionKind::Full, false)?;
        let x = residual_norm(tape, store, &self.norm2, x, c)?;
        let f = self.ff.forward(tape, store, x)?;
        residual_norm(tape, store, &self.norm3, x, f)
    }
}

/// Runs the decoder stack over `token_len + horizon` inputs and returns the
/// trailing `horizon` positions.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[DecoderLayer],
    x: Var,
    memory: Var,
    token_len: usize,
    horizon: usize,
    kind: AttentionKind,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != token_len + horizon {
        return Err(Error::Contract(format!(
            "decoder input has length {:?}, expected token {token_len} + horizon {horizon}",
            s.get(1)
        )));
    }
    if horizon == 0 {
        return Err(Error::Contract("decoder horizon must be positive".into()));
    }
    let mut h = x;
    for layer in layers {
        h = layer.forward(tape, store, h, memory, kind)?;
    }
    tape.slice(h, 1, token_len, horizon)
}
