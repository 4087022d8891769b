//! Temporal stack: attention kernels, the distilling encoder and the
//! one-pass decoder, assembled into an [`Informer`] unit.

pub mod attention;
pub mod blocks;
pub mod decoder;
pub mod encoder;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    full_attention, probsparse_attention, select_u, sparsity_measurement, AttentionKind,
    AttentionParams, SparsityScore, DEFAULT_C_FACTOR,
};
pub use blocks::{FeedForward, LayerNorm};
pub use decoder::{decode, DecoderLayer};
pub use encoder::{distill, Distill, EncoderLayer, EncoderStack};

use crate::error::{Error, Result};
use crate::numerics::init::uniform_fan_in;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Shape and depth of one Informer unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub replicas: usize,
    pub decoder_layers: usize,
    /// `u = ceil(c · ln l_Q)` for ProbSparse attention.
    pub c_factor: f64,
    /// `false` selects canonical attention everywhere.
    pub sparse: bool,
    /// Start-token length; `None` means `E/2` (at least 1).
    pub token_len: Option<usize>,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_mult: usize,
}

impl Default for InformerConfig {
    fn default() -> Self {
        InformerConfig {
            d_model: 32,
            heads: 4,
            encoder_layers: 3,
            replicas: 1,
            decoder_layers: 1,
            c_factor: DEFAULT_C_FACTOR,
            sparse: true,
            token_len: None,
            ff_mult: 4,
        }
    }
}

impl InformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "heads ({}) must divide the model width ({})",
                self.heads, self.d_model
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("encoder and decoder need at least one layer each".into());
        }
        if self.replicas >= self.encoder_layers {
            return fail(format!(
                "{} replicas need more than {} encoder layers",
                self.replicas, self.encoder_layers
            ));
        }
        if !(self.c_factor > 0.0 && self.c_factor.is_finite()) {
            return fail(format!("c_factor must be positive, got {}", self.c_factor));
        }
        if self.ff_mult == 0 {
            return fail("ff_mult must be positive".into());
        }
        Ok(())
    }

    pub fn kind(&self) -> AttentionKind {
        if self.sparse {
            AttentionKind::ProbSparse {
                c_factor: self.c_factor,
            }
        } else {
            AttentionKind::Full
        }
    }

    pub fn token_len(&self, input_len: usize) -> usize {
        self.token_len.unwrap_or((input_len / 2).max(1))
    }

    /// Checks that an encoder input of `input_len` and the derived start
    /// token are admissible.
    pub fn check_lengths(&self, input_len: usize) -> Result<()> {
        let div = 1usize << (self.encoder_layers - 1);
        if input_len == 0 || input_len % div != 0 {
            return Err(Error::Parameter(format!(
                "input window {input_len} must be a positive multiple of 2^(encoder_layers-1) = {div}"
            )));
        }
        let lt = self.token_len(input_len);
        if lt == 0 || lt > input_len {
            return Err(Error::Parameter(format!(
                "start token {lt} must lie in 1..={input_len}"
            )));
        }
        Ok(())
    }
}

/// Start token (trailing encoder inputs) followed by a zero placeholder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInput {
    pub token: Tensor,
    pub placeholder: Tensor,
}

impl DecoderInput {
    /// Takes the trailing `token_len` rows of `x: L×d`.
    pub fn new(x: &Tensor, token_len: usize, horizon: usize) -> Result<Self> {
        let [l, d] = *x.shape() else {
            return Err(Error::dim("decoder input", x.shape(), &[]));
        };
        if token_len == 0 || token_len > l {
            return Err(Error::Contract(format!(
                "start token {token_len} does not fit an input of length {l}"
            )));
        }
        let token = Tensor::new(vec![token_len, d], x.data()[(l - token_len) * d..].to_vec())?;
        Ok(DecoderInput {
            token,
            placeholder: Tensor::zeros(&[horizon, d]),
        })
    }

    /// `X_de`, of length `token_len + horizon`.
    pub fn concatenated(&self) -> Result<Tensor> {
        let d = self.token.shape()[1];
        let mut data = self.token.data().to_vec();
        data.extend_from_slice(self.placeholder.data());
        Tensor::new(vec![data.len() / d.max(1), d], data)
    }
}

/// Input projection, learned positions, encoder stack and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Informer {
    pub config: InformerConfig,
    pub input_len: usize,
    pub horizon: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub positions: ParamId,
    pub encoder: EncoderStack,
    pub decoder: Vec<DecoderLayer>,
}

impl Informer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &InformerConfig,
        input_len: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        config.check_lengths(input_len)?;
        if horizon == 0 {
            return Err(Error::Parameter("forecast horizon must be positive".into()));
        }
        let d = config.d_model;
        let hidden = config.ff_mult * d;
        let w_in = store.add(format!("{prefix}.w_in"), uniform_fan_in(rng, &[d, d], d));
        let b_in = store.add(format!("{prefix}.b_in"), Tensor::zeros(&[d]));
        let positions = store.add(
            format!("{prefix}.positions"),
            uniform_fan_in(rng, &[input_len + horizon, d], d),
        );
        let encoder = EncoderStack::new(
            store,
            &format!("{prefix}.enc"),
            config.encoder_layers,
            config.replicas,
            d,
            config.heads,
            hidden,
            rng,
        )?;
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                DecoderLayer::new(store, &format!("{prefix}.dec{i}"), d, config.heads, hidden, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Informer {
            config: config.clone(),
            input_len,
            horizon,
            w_in,
            b_in,
            positions,
            encoder,
            decoder,
        })
    }

    pub fn token_len(&self) -> usize {
        self.config.token_len(self.input_len)
    }

    /// `x: B×E×d` → `B×F′×d`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let d = self.config.d_model;
        if s.len() != 3 || s[1] != self.input_len || s[2] != d {
            return Err(Error::dim(
                "informer input",
                &s,
                &[s.first().copied().unwrap_or(0), self.input_len, d],
            ));
        }
        let batch = s[0];
        let (e, f, lt) = (self.input_len, self.horizon, self.token_len());
        let kind = self.config.kind();

        let w = tape.param(store, self.w_in);
        let b = tape.param(store, self.b_in);
        let pos = tape.param(store, self.positions);
        let proj = tape.linear(x, w, Some(b))?;

        let enc_pos = tape.slice(pos, 0, 0, e)?;
        let enc_in = tape.add_bcast(proj, enc_pos)?;
        let memory = self.encoder.encode(tape, store, enc_in, kind)?;

        let token = tape.slice(proj, 1, e - lt, lt)?;
        let zeros = tape.constant(Tensor::zeros(&[batch, f, d]));
        let dec_in = tape.concat(&[token, zeros], 1)?;
        let dec_pos = tape.slice(pos, 0, e - lt, lt + f)?;
        let dec_in = tape.add_bcast(dec_in, dec_pos)?;
        decode(tape, store, &self.decoder, dec_in, memory, lt, f, kind)
    }
}

/// Eager encoder pass over a single `L×d` series.
pub fn encode(
    store: &ParamStore,
    stack: &EncoderStack,
    x: &Tensor,
    kind: AttentionKind,
) -> Result<Tensor> {
    let [l, d] = *x.shape() else {
        return Err(Error::dim("encode", x.shape(), &[]));
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, l, d])?);
    let out = stack.encode(&mut tape, store, xv, kind)?;
    let s = tape.shape(out).to_vec();
    tape.value(out).clone().reshape(&s[1..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decoder_input_layout() {
        let x = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
        let di = DecoderInput::new(&x, 2, 3).unwrap();
        assert_eq!(di.token.data(), &[4.0, 5.0, 6.0, 7.0]);
        assert!(di.placeholder.data().iter().all(|&v| v == 0.0));
        let cat = di.concatenated().unwrap();
        assert_eq!(cat.shape(), &[5, 2]);
        assert!(DecoderInput::new(&x, 5, 1).is_err());
    }

    #[test]
    fn config_rules() {
        assert!(InformerConfig::default().validate().is_ok());
        let bad = InformerConfig { heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = InformerConfig { replicas: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let cfg = InformerConfig::default();
        assert_eq!(cfg.token_len(24), 12);
        assert_eq!(cfg.token_len(1), 1);
        assert!(cfg.check_lengths(12).is_ok());
        assert!(cfg.check_lengths(10).is_err());
    }

    #[test]
    fn minimal_window_decodes_one_step() {
        let cfg = InformerConfig {
            d_model: 4,
            heads: 2,
            encoder_layers: 1,
            replicas: 0,
            token_len: Some(1),
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inf = Informer::new(&mut store, "inf", &cfg, 1, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[2, 1, 4], 0.5));
        let y = inf.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 4]);
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn decoder_length_contract() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = DecoderLayer::new(&mut store, "dec", 4, 2, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5, 4]));
        let mem = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let err = decode(&mut tape, &store, &[layer], x, mem, 2, 2, AttentionKind::Full);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
