//! Spatial layer: a temporal convolution front end (feature convolution
//! aggregator) followed by multi-head graph attention with head averaging.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::numerics::init::uniform_fan_in;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Shape of the feature convolution aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcaConfig {
    pub kernel_width: usize,
    pub out_channels: usize,
}

impl Default for FcaConfig {
    fn default() -> Self {
        FcaConfig {
            kernel_width: 3,
            out_channels: 16,
        }
    }
}

impl FcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_width % 2 == 0 {
            return Err(Error::Parameter(format!(
                "FCA kernel width must be odd, got {}",
                self.kernel_width
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Parameter("FCA needs at least one output channel".into()));
        }
        Ok(())
    }
}

/// Per-node temporal convolution over stacked `[speed ‖ externals]`
/// channels. Parameters are shared by all nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Fca {
    pub config: FcaConfig,
    pub in_channels: usize,
    pub kernels: ParamId,
    pub bias: ParamId,
}

impl Fca {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: FcaConfig,
        external_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let in_channels = 1 + external_channels;
        let shape = [config.out_channels, in_channels, config.kernel_width];
        let kernels = store.add(
            format!("{prefix}.kernels"),
            uniform_fan_in(rng, &shape, in_channels * config.kernel_width),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[config.out_channels]));
        Ok(Fca {
            config,
            in_channels,
            kernels,
            bias,
        })
    }

    /// `speeds: E×N`, `externals: E×N×k` → features `E×N×ℱ`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        speeds: Var,
        externals: Option<Var>,
    ) -> Result<Var> {
        let [steps, nodes] = *tape.shape(speeds) else {
            return Err(Error::dim("fca_aggregate", tape.shape(speeds), &[]));
        };
        let s = tape.reshape(speeds, &[steps, nodes, 1])?;
        let stacked = match externals {
            Some(ext) => {
                let es = tape.shape(ext);
                if es.len() != 3 || es[0] != steps || es[1] != nodes {
                    return Err(Error::Validation(format!(
                        "external factors of shape {es:?} are not aligned with {steps}×{nodes} speeds"
                    )));
                }
                tape.concat(&[s, ext], 2)?
            }
            None => s,
        };
        let channels = tape.shape(stacked)[2];
        if channels != self.in_channels {
            return Err(Error::dim(
                "fca_aggregate channels",
                &[channels],
                &[self.in_channels],
            ));
        }
        let per_node = tape.permute(stacked, &[1, 0, 2])?;
        let k = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        let conv = tape.conv1d(per_node, k)?;
        let conv = tape.add_bcast(conv, b)?;
        tape.permute(conv, &[1, 0, 2])
    }
}

/// Eager FCA evaluation.
pub fn fca_aggregate(
    store: &ParamStore,
    fca: &Fca,
    speed_window: &Tensor,
    externals: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(speed_window.clone());
    let e = externals.map(|e| tape.constant(e.clone()));
    let out = fca.forward(&mut tape, store, s, e)?;
    Ok(tape.value(out).clone())
}

/// Multi-head graph attention layer whose head outputs are averaged.
///
/// Each head's transform is stored as an `ℱ×ℱ′` matrix applied to row
/// vectors (`x·W`), and its attention vector as `2ℱ′` entries: the first half
/// scores the attending node, the second half the neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayer {
    pub weights: Vec<ParamId>,
    pub attention: Vec<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
    pub leaky_slope: f64,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || in_features == 0 || out_features == 0 {
            return Err(Error::Parameter(format!(
                "GAT needs positive sizes (heads {heads}, in {in_features}, out {out_features})"
            )));
        }
        let mut weights = Vec::with_capacity(heads);
        let mut attention = Vec::with_capacity(heads);
        for h in 0..heads {
            weights.push(store.add(
                format!("{prefix}.head{h}.w"),
                uniform_fan_in(rng, &[in_features, out_features], in_features),
            ));
            attention.push(store.add(
                format!("{prefix}.head{h}.att"),
                uniform_fan_in(rng, &[2 * out_features], 2 * out_features),
            ));
        }
        Ok(GatLayer {
            weights,
            attention,
            in_features,
            out_features,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    /// Registers explicit per-head parameters.
    pub fn from_tensors(
        store: &mut ParamStore,
        prefix: &str,
        weights: Vec<Tensor>,
        attention: Vec<Tensor>,
        leaky_slope: f64,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != attention.len() {
            return Err(Error::Parameter(format!(
                "need matching, nonempty head lists ({} weights, {} attention vectors)",
                weights.len(),
                attention.len()
            )));
        }
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::Parameter(format!(
                "leaky ReLU slope must lie in (0, 1), got {leaky_slope}"
            )));
        }
        let [fin, fout] = *weights[0].shape() else {
            return Err(Error::dim("GatLayer", weights[0].shape(), &[]));
        };
        let mut w_ids = Vec::new();
        let mut a_ids = Vec::new();
        for (h, (w, a)) in weights.into_iter().zip(attention).enumerate() {
            if w.shape() != [fin, fout] || a.shape() != [2 * fout] {
                return Err(Error::dim("GatLayer head", w.shape(), a.shape()));
            }
            w_ids.push(store.add(format!("{prefix}.head{h}.w"), w));
            a_ids.push(store.add(format!("{prefix}.head{h}.att"), a));
        }
        Ok(GatLayer {
            weights: w_ids,
            attention: a_ids,
            in_features: fin,
            out_features: fout,
            leaky_slope,
        })
    }

    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    fn check_input(&self, tape: &Tape, x: Var, graph: &RoadGraph) -> Result<(usize, usize)> {
        match *tape.shape(x) {
            [t, n, f] if n == graph.n_nodes() && f == self.in_features => Ok((t, n)),
            _ => Err(Error::dim(
                "gat input",
                tape.shape(x),
                &[graph.n_nodes(), self.in_features],
            )),
        }
    }

    /// Transformed features `x·W` and neighbourhood-normalised coefficients
    /// for head `head`; `x` is `T×N×ℱ`, coefficients are `T×N×N`.
    pub fn head_coefficients(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: &RoadGraph,
        mask: &[bool],
        head: usize,
    ) -> Result<(Var, Var)> {
        let (steps, nodes) = self.check_input(tape, x, graph)?;
        let fo = self.out_features;
        let w = tape.param(store, self.weights[head]);
        let att = tape.param(store, self.attention[head]);
        let hx = tape.matmul(x, w)?;
        let a_self = tape.slice(att, 0, 0, fo)?;
        let a_self = tape.reshape(a_self, &[fo, 1])?;
        let a_nbr = tape.slice(att, 0, fo, fo)?;
        let a_nbr = tape.reshape(a_nbr, &[fo, 1])?;
        let s_self = tape.matmul(hx, a_self)?;
        let s_self = tape.reshape(s_self, &[steps, nodes])?;
        let s_nbr = tape.matmul(hx, a_nbr)?;
        let s_nbr = tape.reshape(s_nbr, &[steps, nodes])?;
        let e = tape.outer_sum(s_self, s_nbr)?;
        let e = tape.leaky_relu(e, self.leaky_slope);
        let alpha = tape.softmax(e, Some(mask))?;
        Ok((hx, alpha))
    }

    /// `x: T×N×ℱ` → `T×N×ℱ′`: per-head attention-weighted neighbour sums,
    /// averaged over heads, then ELU.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: &RoadGraph,
    ) -> Result<Var> {
        self.check_input(tape, x, graph)?;
        let mask = graph.mask();
        let mut acc: Option<Var> = None;
        for head in 0..self.heads() {
            let (hx, alpha) = self.head_coefficients(tape, store, x, graph, &mask, head)?;
            let agg = tape.bmm(alpha, hx, false)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, agg)?,
                None => agg,
            });
        }
        let sum = acc.expect("at least one head");
        let mean = tape.scale(sum, 1.0 / self.heads() as f64);
        Ok(tape.elu(mean))
    }
}

fn single_step(x: &Tensor, layer: &GatLayer) -> Result<(usize, Tensor)> {
    match *x.shape() {
        [n, f] if f == layer.in_features => Ok((n, x.clone().reshape(&[1, n, f])?)),
        _ => Err(Error::dim("gat input", x.shape(), &[layer.in_features])),
    }
}

/// Attention coefficients `C×N×N` for node features `x: N×ℱ`.
pub fn attention_coefficients(
    store: &ParamStore,
    x: &Tensor,
    layer: &GatLayer,
    graph: &RoadGraph,
) -> Result<Tensor> {
    let (n, x3) = single_step(x, layer)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x3);
    let mask = graph.mask();
    let mut data = Vec::with_capacity(layer.heads() * n * n);
    for head in 0..layer.heads() {
        let (_, alpha) = layer.head_coefficients(&mut tape, store, xv, graph, &mask, head)?;
        data.extend_from_slice(tape.value(alpha).data());
    }
    Tensor::new(vec![layer.heads(), n, n], data)
}

/// Layer output `N×ℱ′` for node features `x: N×ℱ`.
pub fn gat_forward(
    store: &ParamStore,
    x: &Tensor,
    layer: &GatLayer,
    graph: &RoadGraph,
) -> Result<Tensor> {
    let (n, x3) = single_step(x, layer)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x3);
    let out = layer.forward(&mut tape, store, xv, graph)?;
    tape.value(out).clone().reshape(&[n, layer.out_features])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line_graph() -> RoadGraph {
        let d = Tensor::from_rows(&[
            vec![0.0, 1.0, 2.0],
            vec![1.0, 0.0, 1.0],
            vec![2.0, 1.0, 0.0],
        ])
        .unwrap();
        RoadGraph::build_adjacency(&d, 1.0, 1.5).unwrap()
    }

    #[test]
    fn singleton_neighbourhood_gets_full_weight() {
        let graph = RoadGraph::isolated(3);
        let mut store = ParamStore::new();
        let layer = GatLayer::from_tensors(
            &mut store,
            "gat",
            vec![Tensor::eye(2)],
            vec![Tensor::vector(vec![0.3, -0.2, 0.7, 0.1])],
            0.2,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![-3.0, 0.0]]).unwrap();
        let alpha = attention_coefficients(&store, &x, &layer, &graph).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(alpha.at(&[0, a, b]), if a == b { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn self_loop_identity_is_elu() {
        let graph = RoadGraph::isolated(2);
        let mut store = ParamStore::new();
        let layer = GatLayer::from_tensors(
            &mut store,
            "gat",
            vec![Tensor::eye(2)],
            vec![Tensor::zeros(&[4])],
            0.2,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![-0.5, 2.0]]).unwrap();
        let y = gat_forward(&store, &x, &layer, &graph).unwrap();
        assert_eq!(y, crate::numerics::elu(&x));
    }

    #[test]
    fn identical_neighbours_split_evenly() {
        let d = Tensor::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![9.0, 0.0, 9.0],
            vec![9.0, 9.0, 0.0],
        ])
        .unwrap();
        let graph = RoadGraph::build_adjacency(&d, 1.0, 1.5).unwrap();
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let layer = GatLayer::new(&mut store, "gat", 2, 3, 2, &mut rng).unwrap();
        // Node 0's neighbours 1 and 2 carry identical features.
        let x = Tensor::from_rows(&[vec![0.2, 0.4], vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let alpha = attention_coefficients(&store, &x, &layer, &graph).unwrap();
        for h in 0..2 {
            assert_abs_diff_eq!(alpha.at(&[h, 0, 1]), alpha.at(&[h, 0, 2]), epsilon = 1e-15);
        }
        // Node 1 attends only to itself.
        assert_eq!(alpha.at(&[0, 1, 1]), 1.0);
    }

    #[test]
    fn equal_features_give_equal_outputs() {
        let graph = line_graph();
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let layer = GatLayer::new(&mut store, "gat", 3, 4, 4, &mut rng).unwrap();
        let x = Tensor::from_rows(&vec![vec![0.1, -0.7, 0.4]; 3]).unwrap();
        let y = gat_forward(&store, &x, &layer, &graph).unwrap();
        for a in 1..3 {
            for f in 0..4 {
                assert_abs_diff_eq!(y.at(&[a, f]), y.at(&[0, f]), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn fca_identity_and_constant_series() {
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let cfg = FcaConfig {
            kernel_width: 1,
            out_channels: 1,
        };
        let fca = Fca::new(&mut store, "fca", cfg, 0, &mut rng).unwrap();
        store.get_mut(fca.kernels).data_mut()[0] = 1.0;
        let speeds = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = fca_aggregate(&store, &fca, &speeds, None).unwrap();
        assert_eq!(out.shape(), &[3, 2, 1]);
        assert_eq!(out.data(), speeds.data());

        // Constant series through a width-3 kernel: interior steps equal
        // (kernel sum) × constant + bias.
        let mut store = ParamStore::new();
        let cfg = FcaConfig {
            kernel_width: 3,
            out_channels: 2,
        };
        let fca = Fca::new(&mut store, "fca", cfg, 0, &mut rng).unwrap();
        store.get_mut(fca.bias).data_mut().copy_from_slice(&[0.25, -0.5]);
        let k = store.get(fca.kernels).clone();
        let c = 4.0;
        let speeds = Tensor::filled(&[5, 2], c);
        let out = fca_aggregate(&store, &fca, &speeds, None).unwrap();
        for o in 0..2 {
            let ksum: f64 = (0..3).map(|s| k.at(&[o, 0, s])).sum();
            let bias = [0.25, -0.5][o];
            for t in 1..4 {
                for n in 0..2 {
                    assert_abs_diff_eq!(out.at(&[t, n, o]), ksum * c + bias, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn fca_stacks_external_channels() {
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let fca = Fca::new(&mut store, "fca", FcaConfig::default(), 2, &mut rng).unwrap();
        assert_eq!(fca.in_channels, 3);
        assert_eq!(store.get(fca.kernels).shape(), &[16, 3, 3]);
        let speeds = Tensor::zeros(&[4, 2]);
        let ext = Tensor::zeros(&[4, 2, 2]);
        assert_eq!(
            fca_aggregate(&store, &fca, &speeds, Some(&ext)).unwrap().shape(),
            &[4, 2, 16]
        );
        let misaligned = Tensor::zeros(&[3, 2, 2]);
        assert!(matches!(
            fca_aggregate(&store, &fca, &speeds, Some(&misaligned)),
            Err(Error::Validation(_))
        ));
    }
}
