//! Canonical and ProbSparse scaled dot-product attention.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init::uniform_fan_in;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_C_FACTOR: f64 = 5.0;

/// Number of active queries: `clamp(ceil(c · ln l_q), 1, l_q)`.
pub fn select_u(l_q: usize, c_factor: f64) -> usize {
    if l_q <= 1 {
        return 1;
    }
    let u = (c_factor * (l_q as f64).ln()).ceil();
    if u.is_nan() || u < 1.0 {
        1
    } else {
        (u as usize).min(l_q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttentionKind {
    Full,
    ProbSparse { c_factor: f64 },
}

/// Max-minus-mean of each query's scaled scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityScore {
    pub m_bar: Tensor,
    pub top_u: Vec<usize>,
}

/// Indices of the `u` largest values; ties go to the lower index.
pub fn top_indices(values: &[f64], u: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(u);
    idx
}

/// `M̄` for one row of scaled scores.
fn max_minus_mean(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    max - mean
}

/// Which query rows stay active, per batch, given scaled scores
/// `batch×l_q×l_k`.
///
/// Without a causal mask this is the plain top-`u` under `M̄`. With one, `M̄`
/// for row `i` only looks at keys `j ≤ i`, and row `i` is kept when it ranks
/// within the top `u` of rows `0..=i`; the choice for row `i` then never
/// depends on later positions.
fn active_rows(scores: &[f64], batch: usize, l_q: usize, l_k: usize, u: usize, causal: bool) -> Vec<bool> {
    let mut keep = vec![false; batch * l_q];
    for b in 0..batch {
        let block = &scores[b * l_q * l_k..(b + 1) * l_q * l_k];
        let m: Vec<f64> = (0..l_q)
            .map(|i| {
                let row = &block[i * l_k..(i + 1) * l_k];
                if causal {
                    max_minus_mean(&row[..(i + 1).min(l_k)])
                } else {
                    max_minus_mean(row)
                }
            })
            .collect();
        let out = &mut keep[b * l_q..(b + 1) * l_q];
        if causal {
            for i in 0..l_q {
                let ahead = (0..i).filter(|&k| m[k] >= m[i]).count();
                out[i] = ahead < u;
            }
        } else {
            for i in top_indices(&m, u) {
                out[i] = true;
            }
        }
    }
    keep
}

/// Lower-triangular admissibility pattern (`j ≤ i`).
pub fn causal_mask(l_q: usize, l_k: usize) -> Vec<bool> {
    (0..l_q * l_k).map(|p| p % l_k <= p / l_k).collect()
}

/// Attention over `q: B×l_q×d`, `k: B×l_k×d`, `v: B×l_k×d_v`.
///
/// For ProbSparse, inactive query rows are zeroed before the softmax. A zero
/// query row yields a zero score row, so masking the score rows is the same
/// computation and avoids a second product.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    kind: AttentionKind,
    causal: bool,
) -> Result<Var> {
    let (sq, sk, sv) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(Error::dim("attention", &sq, &sk));
    }
    if sk[1] != sv[1] || sk[0] != sv[0] {
        return Err(Error::dim("attention keys/values", &sk, &sv));
    }
    let (batch, l_q, d) = (sq[0], sq[1], sq[2]);
    let l_k = sk[1];
    if causal && l_q > l_k {
        return Err(Error::dim("causal attention", &sq, &sk));
    }
    let raw = tape.bmm(q, k, true)?;
    let mut scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    if let AttentionKind::ProbSparse { c_factor } = kind {
        let u = select_u(l_q, c_factor);
        if u < l_q {
            let values = tape.value(scores).data().to_vec();
            let rows = tape.select(|| active_rows(&values, batch, l_q, l_k, u, causal));
            let mask: Arc<[f64]> = rows
                .iter()
                .flat_map(|&on| std::iter::repeat_n(if on { 1.0 } else { 0.0 }, l_k))
                .collect();
            scores = tape.mul_const(scores, mask)?;
        }
    }
    let mask = causal.then(|| causal_mask(l_q, l_k));
    let attn = tape.softmax(scores, mask.as_deref())?;
    tape.bmm(attn, v, false)
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [m, n] => t.clone().reshape(&[1, m, n]),
        _ => Err(Error::dim("attention input", t.shape(), &[])),
    }
}

fn eager(q: &Tensor, k: &Tensor, v: &Tensor, kind: AttentionKind) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(as_batch(q)?);
    let kv = tape.constant(as_batch(k)?);
    let vv = tape.constant(as_batch(v)?);
    let out = attention(&mut tape, qv, kv, vv, kind, false)?;
    let s = tape.shape(out).to_vec();
    tape.value(out).clone().reshape(&s[1..])
}

/// `softmax(Q·Kᵀ/√d)·V` for single (unbatched) matrices.
pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    eager(q, k, v, AttentionKind::Full)
}

/// `M̄(q_i, K)` for every query and the indices of the `u` largest.
pub fn sparsity_measurement(q: &Tensor, k: &Tensor, u: usize) -> Result<SparsityScore> {
    if q.rank() != 2 || k.rank() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(Error::dim("sparsity_measurement", q.shape(), k.shape()));
    }
    let (l_q, d) = (q.shape()[0], q.shape()[1]);
    if u > l_q {
        return Err(Error::Parameter(format!("u = {u} exceeds l_q = {l_q}")));
    }
    let l_k = k.shape()[0];
    let scale = 1.0 / (d as f64).sqrt();
    let m_bar: Vec<f64> = (0..l_q)
        .map(|i| {
            let row: Vec<f64> = (0..l_k)
                .map(|j| crate::numerics::kernels::dot(q.row(i), k.row(j)) * scale)
                .collect();
            max_minus_mean(&row)
        })
        .collect();
    let top_u = top_indices(&m_bar, u);
    Ok(SparsityScore {
        m_bar: Tensor::vector(m_bar),
        top_u,
    })
}

/// ProbSparse attention keeping only the top-`u` queries under `M̄`; the
/// other query rows are zero and therefore attend uniformly.
pub fn probsparse_attention(q: &Tensor, k: &Tensor, v: &Tensor, u: usize) -> Result<Tensor> {
    let l_q = *q.shape().first().unwrap_or(&0);
    if u < 1 || u > l_q {
        return Err(Error::Parameter(format!(
            "u must lie in [1, {l_q}], got {u}"
        )));
    }
    let score = sparsity_measurement(q, k, u)?;
    let mut q_bar = Tensor::zeros(q.shape());
    let d = q.shape()[1];
    for &i in &score.top_u {
        q_bar.data_mut()[i * d..(i + 1) * d].copy_from_slice(q.row(i));
    }
    eager(&q_bar, k, v, AttentionKind::Full)
}

/// Projections of one multi-head attention block. Per-head `d_model×d_head`
/// matrices are stored side by side as `d_model×(heads·d_head)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Parameter(format!(
                "{heads} heads do not divide model width {d_model}"
            )));
        }
        let mut mat = |name: &str, rng: &mut R| {
            store.add(
                format!("{prefix}.{name}"),
                uniform_fan_in(rng, &[d_model, d_model], d_model),
            )
        };
        let wq = mat("wq", rng);
        let wk = mat("wk", rng);
        let wv = mat("wv", rng);
        let wo = mat("wo", rng);
        let mut bias = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[d_model]));
        Ok(AttentionParams {
            wq,
            bq: bias("bq"),
            wk,
            bk: bias("bk"),
            wv,
            bv: bias("bv"),
            wo,
            bo: bias("bo"),
            heads,
            d_model,
        })
    }

    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let dh = self.d_model / self.heads;
        let x = tape.reshape(x, &[b, l, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.heads, l, dh])
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, batch: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (l, dh) = (s[1], s[2]);
        let x = tape.reshape(x, &[batch, self.heads, l, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[batch, l, self.d_model])
    }

    /// `x_q: B×l_q×d`, `x_kv: B×l_k×d` → `B×l_q×d`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        kind: AttentionKind,
        causal: bool,
    ) -> Result<Var> {
        let batch = tape.shape(x_q)[0];
        if tape.shape(x_q).len() != 3 || tape.shape(x_q)[2] != self.d_model {
            return Err(Error::dim("multi-head attention", tape.shape(x_q), &[self.d_model]));
        }
        let p = |tape: &mut Tape, id| tape.param(store, id);
        let (wq, bq, wk, bk) = (p(tape, self.wq), p(tape, self.bq), p(tape, self.wk), p(tape, self.bk));
        let (wv, bv, wo, bo) = (p(tape, self.wv), p(tape, self.bv), p(tape, self.wo), p(tape, self.bo));
        let q = tape.linear(x_q, wq, Some(bq))?;
        let k = tape.linear(x_kv, wk, Some(bk))?;
        let v = tape.linear(x_kv, wv, Some(bv))?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        let ctx = attention(tape, q, k, v, kind, causal)?;
        let ctx = self.merge_heads(tape, ctx, batch)?;
        tape.linear(ctx, wo, Some(bo))
    }
}
