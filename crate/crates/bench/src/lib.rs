//! Shared inputs for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgin_core::{RoadGraph, Tensor};

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// Corridor graph: each node linked to its two neighbours on either side.
pub fn corridor(n: usize) -> RoadGraph {
    let mut adj = Tensor::eye(n);
    for a in 0..n {
        for b in 0..n {
            let gap = a.abs_diff(b);
            if gap == 1 || gap == 2 {
                adj.set(&[a, b], (-(gap as f64).powi(2) / 4.0).exp());
            }
        }
    }
    RoadGraph::from_adjacency(adj).expect("weights lie in [0, 1]")
}
