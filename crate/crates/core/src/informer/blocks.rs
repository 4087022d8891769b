use rand::Rng;

use crate::error::Result;
use crate::numerics::init::uniform_fan_in;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Layer normalisation with a learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(&[width], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let n = tape.layer_norm(x, LN_EPS);
        let n = tape.mul_bcast(n, g)?;
        tape.add_bcast(n, b)
    }
}

/// Position-wise `d → ff → d` block with an ELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            w1: store.add(
                format!("{prefix}.w1"),
                uniform_fan_in(rng, &[d_model, hidden], d_model),
            ),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(
                format!("{prefix}.w2"),
                uniform_fan_in(rng, &[hidden, d_model], hidden),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d_model])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.elu(h);
        tape.linear(h, w2, Some(b2))
    }
}

/// `norm(x + f(x))`.
pub fn residual_norm(
    tape: &mut Tape,
    store: &ParamStore,
    norm: &LayerNorm,
    x: Var,
    fx: Var,
) -> Result<Var> {
    let s = tape.add(x, fx)?;
    norm.forward(tape, store, s)
}
