//! Reverse-mode differentiation over a recorded computation tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and enough bookkeeping to run the adjoint. Calling
//! [`Tape::backward`] on a scalar node walks the tape once in reverse and
//! returns gradients for every leaf and parameter that requires them.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Constant,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<[f64]>),
    Softmax {
        x: Var,
        cols: usize,
    },
    LeakyRelu(Var, f64),
    Elu(Var),
    Conv1d {
        x: Var,
        k: Var,
        taps: Vec<f64>,
        dims: [usize; 5],
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
        width: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    OuterSum {
        u: Var,
        v: Var,
        n: usize,
    },
    Sum(Var),
    Mse {
        pred: Var,
        target: Arc<[f64]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Row selections made during a forward pass (ProbSparse top-u choices).
///
/// Recording them on one pass and replaying them on another freezes the
/// discrete choices, which is what a finite-difference check needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionLog {
    entries: Vec<Vec<bool>>,
    cursor: usize,
    replay: bool,
}

impl SelectionLog {
    pub fn replaying(entries: Vec<Vec<bool>>) -> Self {
        SelectionLog {
            entries,
            cursor: 0,
            replay: true,
        }
    }

    pub fn entries(&self) -> &[Vec<bool>] {
        &self.entries
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    selections: SelectionLog,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    nodes: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn into_params(self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that replays previously recorded row selections.
    pub fn with_selections(log: SelectionLog) -> Self {
        Tape {
            selections: log,
            ..Self::default()
        }
    }

    pub fn selections(&self) -> &SelectionLog {
        &self.selections
    }

    pub fn into_selections(self) -> SelectionLog {
        SelectionLog {
            replay: false,
            cursor: 0,
            ..self.selections
        }
    }

    /// Returns the next frozen selection when replaying, otherwise computes
    /// and records a fresh one.
    pub fn select(&mut self, compute: impl FnOnce() -> Vec<bool>) -> Vec<bool> {
        let log = &mut self.selections;
        if log.replay && log.cursor < log.entries.len() {
            log.cursor += 1;
            return log.entries[log.cursor - 1].clone();
        }
        let sel = compute();
        log.entries.push(sel.clone());
        log.cursor = log.entries.len();
        sel
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let value = Tensor::new(shape, data).expect("tape node shape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    /// A differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Registers a parameter (once per tape) and returns its node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(id),
            true,
        );
        self.params.insert(id, v);
        v
    }

    /// `a · b` where `a` is `[..., k]` and `b` is `k×n`; leading axes of `a`
    /// are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product of `batch×m×k` with `batch×k×n` (or `batch×n×k` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    kernels::gemm_nt(ai, bi, oi, m, k, n);
                } else {
                    kernels::gemm_nn(ai, bi, oi, m, k, n);
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        let op = Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(vec![batch, m, n], out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_bcast", a, b)?;
        let bd = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .chunks(bd.len())
            .flat_map(|c| c.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBcast(a, b), rg))
    }

    /// `a ⊙ b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_bcast", a, b)?;
        let bd = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .chunks(bd.len())
            .flat_map(|c| c.iter().zip(bd).map(|(x, y)| x * y))
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulBcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let rg = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant (non-differentiable) array.
    pub fn mul_const(&mut self, a: Var, c: Arc<[f64]>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::dim("mul_const", self.shape(a), &[c.len()]));
        }
        let out = self.data(a).iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let rg = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a, c), rg))
    }

    /// Softmax over the last axis. `mask`, when given, is a `rows×cols`
    /// admissibility pattern repeated over the leading rows; masked entries
    /// are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::dim("softmax", &shape, &[]))?;
        let rows = numel(&shape) / cols.max(1);
        if let Some(m) = mask {
            if m.is_empty() || m.len() % cols != 0 || rows % (m.len() / cols) != 0 {
                return Err(Error::dim("softmax mask", &shape, &[m.len()]));
            }
        }
        let mut out = vec![0.0; numel(&shape)];
        kernels::softmax_rows(self.data(x), &mut out, cols, mask);
        let rg = self.needs(x);
        Ok(self.push(shape, out, Op::Softmax { x, cols }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let rg = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { v.exp_m1() })
            .collect();
        let rg = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Elu(x), rg)
    }

    /// Same-padded temporal convolution of `batch×len×c_in` with
    /// `c_out×c_in×width` kernels.
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sx[2] != sk[1] {
            return Err(Error::dim("conv1d", &sx, &sk));
        }
        let (batch, len, c_in) = (sx[0], sx[1], sx[2]);
        let (c_out, width) = (sk[0], sk[2]);
        if width % 2 == 0 {
            return Err(Error::Parameter(format!(
                "convolution width must be odd, got {width}"
            )));
        }
        let taps = kernels::conv_taps(self.data(k), c_out, c_in, width);
        let mut out = vec![0.0; batch * len * c_out];
        kernels::conv1d_forward(
            self.data(x),
            &taps,
            &mut out,
            batch,
            len,
            c_in,
            c_out,
            width,
        );
        let rg = self.needs(x) || self.needs(k);
        let op = Op::Conv1d {
            x,
            k,
            taps,
            dims: [batch, len, c_in, c_out, width],
        };
        Ok(self.push(vec![batch, len, c_out], out, op, rg))
    }

    /// Max-pool along the time axis of `batch×len×channels`.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::dim("maxpool1d", &sx, &[]));
        }
        if window == 0 || stride == 0 {
            return Err(Error::Parameter(format!(
                "max-pool window and stride must be positive (window {window}, stride {stride})"
            )));
        }
        if pad >= window {
            return Err(Error::Parameter(format!(
                "max-pool padding {pad} must be smaller than window {window}"
            )));
        }
        let (batch, len, ch) = (sx[0], sx[1], sx[2]);
        let out_len = kernels::pool_out_len(len, window, stride, pad).ok_or_else(|| {
            Error::Parameter(format!("series of length {len} too short for window {window}"))
        })?;
        let (out, arg) =
            kernels::maxpool1d_forward(self.data(x), batch, len, ch, window, stride, pad, out_len);
        let rg = self.needs(x);
        Ok(self.push(vec![batch, out_len, ch], out, Op::MaxPool { x, arg }, rg))
    }

    /// Normalises each row over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("layer_norm on a scalar");
        let (y, inv_std) = kernels::layer_norm_forward(self.data(x), width, eps);
        let rg = self.needs(x);
        self.push(shape, y, Op::LayerNorm { x, inv_std, width }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &shape, axes));
        }
        let (out, out_shape) = kernels::permute(self.data(x), &shape, axes);
        let rg = self.needs(x);
        let op = Op::Permute {
            x,
            axes: axes.to_vec(),
        };
        Ok(self.push(out_shape, out, op, rg))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        (outer, shape[axis], inner)
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, axis_len, inner) = Self::axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.needs(x);
        let op = Op::Slice {
            x,
            outer,
            axis_len,
            inner,
            start,
            len,
        };
        Ok(self.push(out_shape, out, op, rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::dim("concat", &base_shape, &[axis]));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base_shape, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = Self::axis_split(&base_shape, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let src = self.data(p);
                out.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let rg = parts.iter().any(|&p| self.needs(p));
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            inner,
            lens,
        };
        Ok(self.push(out_shape, out, op, rg))
    }

    /// `out[..., i, j] = u[..., i] + v[..., j]`.
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        if su != sv || su.is_empty() {
            return Err(Error::dim("outer_sum", &su, &sv));
        }
        let n = su[su.len() - 1];
        let groups = numel(&su) / n.max(1);
        let (ud, vd) = (self.data(u), self.data(v));
        let mut out = Vec::with_capacity(groups * n * n);
        for g in 0..groups {
            let ug = &ud[g * n..(g + 1) * n];
            let vg = &vd[g * n..(g + 1) * n];
            for &ui in ug {
                out.extend(vg.iter().map(|&vj| ui + vj));
            }
        }
        let mut shape = su;
        shape.push(n);
        let rg = self.needs(u) || self.needs(v);
        Ok(self.push(shape, out, Op::OuterSum { u, v, n }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.needs(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("mse", self.shape(pred), target.shape()));
        }
        let n = target.len() as f64;
        let loss = self
            .data(pred)
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.needs(pred);
        let op = Op::Mse {
            pred,
            target: Arc::from(target.data()),
        };
        Ok(self.push(vec![], vec![loss], op, rg))
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bcast(y, b),
            None => Ok(y),
        }
    }

    /// Runs the adjoint pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.adjoint(node, &g, &mut grads);
            match node.op {
                Op::Leaf => {
                    out.nodes.insert(i, g);
                }
                Op::Param(id) => out.params.push((id, g)),
                _ => {}
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn adjoint(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Constant => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = self.acc(grads, a) {
                    kernels::gemm_nt(g, self.data(b), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, b) {
                    kernels::gemm_tn(self.data(a), g, db, k, m, n);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if let Some(da) = self.acc(grads, a) {
                    let bd = self.data(b);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            kernels::gemm_nn(gi, bi, dai, m, n, k);
                        } else {
                            kernels::gemm_nt(gi, bi, dai, m, n, k);
                        }
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    let ad = self.data(a);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // d(Bᵀ) = Aᵀ G  ⇒  dB = Gᵀ A
                            kernels::gemm_tn(gi, ai, dbi, n, m, k);
                        } else {
                            kernels::gemm_tn(ai, gi, dbi, k, m, n);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::AddBcast(a, b) => {
                if let Some(da) = self.acc(grads, a) {
                    da.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(db) = self.acc(grads, b) {
                    let n = db.len();
                    for c in g.chunks(n) {
                        db.iter_mut().zip(c).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::MulBcast(a, b) => {
                let bd = self.data(b);
                if let Some(da) = self.acc(grads, a) {
                    for (dc, gc) in da.chunks_mut(bd.len()).zip(g.chunks(bd.len())) {
                        for ((d, &gv), &bv) in dc.iter_mut().zip(gc).zip(bd) {
                            *d += gv * bv;
                        }
                    }
                }
                let ad = self.data(a);
                if let Some(db) = self.acc(grads, b) {
                    let n = db.len();
                    for (ac, gc) in ad.chunks(n).zip(g.chunks(n)) {
                        for ((d, &gv), &av) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * av;
                        }
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, y), m) in d.iter_mut().zip(g).zip(c.iter()) {
                        *x += y * m;
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if let Some(dx) = self.acc(grads, x) {
                    kernels::softmax_rows_backward(node.value.data(), g, dx, cols);
                }
            }
            &Op::LeakyRelu(x, slope) => {
                let xd = self.data(x);
                if let Some(dx) = self.acc(grads, x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += if xv >= 0.0 { gv } else { slope * gv };
                    }
                }
            }
            &Op::Elu(x) => {
                let xd = self.data(x);
                let yd = node.value.data();
                if let Some(dx) = self.acc(grads, x) {
                    for (((d, &gv), &xv), &yv) in dx.iter_mut().zip(g).zip(xd).zip(yd) {
                        *d += if xv >= 0.0 { gv } else { gv * (yv + 1.0) };
                    }
                }
            }
            Op::Conv1d { x, k, taps, dims } => {
                let [batch, len, c_in, c_out, width] = *dims;
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::conv1d_backward(
                        self.data(*x),
                        taps,
                        g,
                        Some(dx),
                        None,
                        batch,
                        len,
                        c_in,
                        c_out,
                        width,
                    );
                }
                let mut dtaps = self.needs(*k).then(|| vec![0.0; taps.len()]);
                if let Some(dt) = dtaps.as_deref_mut() {
                    kernels::conv1d_backward(
                        self.data(*x),
                        taps,
                        g,
                        None,
                        Some(dt),
                        batch,
                        len,
                        c_in,
                        c_out,
                        width,
                    );
                }
                if let (Some(dt), Some(dk)) = (dtaps, self.acc(grads, *k)) {
                    let dkern = kernels::taps_to_kernels(&dt, c_out, c_in, width);
                    dk.iter_mut().zip(&dkern).for_each(|(a, b)| *a += b);
                }
            }
            Op::MaxPool { x, arg } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (&src, &gv) in arg.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::LayerNorm { x, inv_std, width } => {
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::layer_norm_backward(node.value.data(), inv_std, g, dx, *width);
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Permute { x, axes } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let (back, _) =
                        kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                    dx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            &Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                if let Some(dx) = self.acc(grads, x) {
                    for o in 0..outer {
                        let dst = (o * axis_len + start) * inner;
                        let src = o * len * inner;
                        for (a, b) in dx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *a += b;
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &l) in parts.iter().zip(lens) {
                    if let Some(dp) = self.acc(grads, p) {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            for (a, b) in dp[o * l * inner..(o + 1) * l * inner]
                                .iter_mut()
                                .zip(&g[src..src + l * inner])
                            {
                                *a += b;
                            }
                        }
                    }
                    offset += l;
                }
            }
            &Op::OuterSum { u, v, n } => {
                if let Some(du) = self.acc(grads, u) {
                    for (i, d) in du.iter_mut().enumerate() {
                        let (grp, row) = (i / n, i % n);
                        let base = (grp * n + row) * n;
                        *d += g[base..base + n].iter().sum::<f64>();
                    }
                }
                if let Some(dv) = self.acc(grads, v) {
                    for (j, d) in dv.iter_mut().enumerate() {
                        let (grp, col) = (j / n, j % n);
                        *d += (0..n).map(|r| g[(grp * n + r) * n + col]).sum::<f64>();
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mse { pred, target } => {
                let pd = self.data(*pred);
                if let Some(dp) = self.acc(grads, *pred) {
                    let scale = 2.0 * g[0] / target.len() as f64;
                    for ((d, &p), &t) in dp.iter_mut().zip(pd).zip(target.iter()) {
                        *d += scale * (p - t);
                    }
                }
            }
        }
    }
}
