use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgin_core::data::window_count;
use stgin_core::gat::{gat_forward, GatLayer};
use stgin_core::informer::attention::{
    attention, full_attention, probsparse_attention, sparsity_measurement, AttentionKind,
};
use stgin_core::numerics::gradcheck::{grad_check, DEFAULT_STEP};
use stgin_core::numerics::kernels::pool_out_len;
use stgin_core::numerics::{conv1d_time, maxpool1d, softmax_rows};
use stgin_core::train_eval::{accuracy, mae, rmse};
use stgin_core::{ParamStore, RoadGraph, Tape, Tensor};

fn tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_graph(seed: u64, n: usize) -> RoadGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj = Tensor::eye(n);
    for a in 0..n {
        for b in 0..n {
            if a != b && rng.random_bool(0.4) {
                adj.set(&[a, b], rng.random_range(0.1..1.0));
            }
        }
    }
    RoadGraph::from_adjacency(adj).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        seed in any::<u64>(),
        rows in 1usize..8,
        cols in 1usize..24,
        shift in -50.0f64..50.0,
    ) {
        let x = tensor(seed, &[rows, cols], 10.0);
        let s = softmax_rows(&x).unwrap();
        for r in 0..rows {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
        }
        let shifted = softmax_rows(&x.map(|v| v + shift)).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn conv_is_linear(seed in any::<u64>(), len in 1usize..20, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = tensor(seed, &[len, 2], 1.0);
        let y = tensor(seed ^ 1, &[len, 2], 1.0);
        let k = tensor(seed ^ 2, &[3, 2, 3], 1.0);
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv1d_time(&Tensor::new(vec![len, 2], mix).unwrap(), &k).unwrap();
        let cx = conv1d_time(&x, &k).unwrap();
        let cy = conv1d_time(&y, &k).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn maxpool_length_follows_formula(len in 1usize..64, window in 1usize..5, stride in 1usize..4, pad in 0usize..2) {
        prop_assume!(pad < window);
        let x = tensor(len as u64, &[len, 3], 1.0);
        let out = maxpool1d(&x, window, stride, pad);
        match pool_out_len(len, window, stride, pad) {
            Some(n) => {
                prop_assert_eq!(n, (len + 2 * pad - window) / stride + 1);
                let out = out.unwrap();
                prop_assert_eq!(out.shape(), &[n, 3]);
            }
            None => prop_assert!(len + 2 * pad < window && out.is_err()),
        }
    }

    #[test]
    fn probsparse_with_all_queries_is_full_attention(
        seed in any::<u64>(),
        l_q in 1usize..16,
        l_k in 1usize..16,
        d in 1usize..12,
    ) {
        let q = tensor(seed, &[l_q, d], 1.0);
        let k = tensor(seed ^ 3, &[l_k, d], 1.0);
        let v = tensor(seed ^ 4, &[l_k, d], 1.0);
        let full = full_attention(&q, &k, &v).unwrap();
        let sparse = probsparse_attention(&q, &k, &v, l_q).unwrap();
        prop_assert!(full.max_abs_diff(&sparse) <= 1e-10);
    }

    #[test]
    fn sparsity_score_bounds_the_exact_measure(seed in any::<u64>(), l_q in 1usize..16, l_k in 1usize..16, d in 1usize..12) {
        let q = tensor(seed, &[l_q, d], 2.0);
        let k = tensor(seed ^ 5, &[l_k, d], 2.0);
        let score = sparsity_measurement(&q, &k, 1).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..l_q {
            let s: Vec<f64> = (0..l_k)
                .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() * scale)
                .collect();
            let lse = s.iter().map(|x| x.exp()).sum::<f64>().ln();
            let m = lse - s.iter().sum::<f64>() / l_k as f64;
            let m_bar = score.m_bar.data()[i];
            prop_assert!(m_bar <= m + 1e-12);
            prop_assert!(m <= m_bar + (l_k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn rmse_dominates_mae_and_accuracy_is_scale_free(seed in any::<u64>(), n in 1usize..40, c in 0.1f64..100.0) {
        let y = tensor(seed, &[n], 1.0).map(|v| v + 2.0);
        let y_hat = tensor(seed ^ 6, &[n], 1.0).map(|v| v + 2.0);
        prop_assert!(rmse(&y, &y_hat).unwrap() >= mae(&y, &y_hat).unwrap() - 1e-15);
        let a = accuracy(&y, &y_hat).unwrap();
        let scaled = accuracy(&y.map(|v| c * v), &y_hat.map(|v| c * v)).unwrap();
        prop_assert!((a - scaled).abs() <= 1e-12);
        prop_assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn window_count_matches_enumeration(steps in 0usize..80, e in 1usize..20, f in 1usize..20) {
        let brute = (0..steps).filter(|&s| s + e + f <= steps).count();
        prop_assert_eq!(window_count(steps, e, f), brute);
    }

    #[test]
    fn gat_output_ignores_non_neighbours(seed in any::<u64>(), n in 2usize..8) {
        let graph = random_graph(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "gat", 3, 4, 2, &mut rng).unwrap();
        let x = tensor(seed ^ 7, &[n, 3], 1.0);
        let y = gat_forward(&store, &x, &layer, &graph).unwrap();
        for a in 0..n {
            let outside: Vec<usize> = (0..n).filter(|b| !graph.neighborhood(a).contains(b)).collect();
            if outside.is_empty() {
                continue;
            }
            let mut x2 = x.clone();
            for &b in &outside {
                for c in 0..3 {
                    x2.set(&[b, c], rng.random_range(-9.0..9.0));
                }
            }
            let y2 = gat_forward(&store, &x2, &layer, &graph).unwrap();
            prop_assert_eq!(y.row(a), y2.row(a));
        }
    }

    #[test]
    fn gat_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..8) {
        let graph = random_graph(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "gat", 3, 4, 2, &mut rng).unwrap();
        let x = tensor(seed ^ 8, &[n, 3], 1.0);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
        let px = Tensor::from_rows(&rows).unwrap();
        let y = gat_forward(&store, &x, &layer, &graph).unwrap();
        let py = gat_forward(&store, &px, &layer, &graph.permuted(&perm).unwrap()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (u, v) in py.row(i).iter().zip(y.row(p)) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pointwise_ops_pass_gradient_checks(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..7) {
        let x = tensor(seed, &[rows, cols], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 9);
        let w: Arc<[f64]> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ops: [(&str, fn(&mut Tape, stgin_core::Var) -> stgin_core::Var); 4] = [
            ("elu", |t, p| t.elu(p)),
            ("leaky_relu", |t, p| t.leaky_relu(p, 0.2)),
            ("layer_norm", |t, p| t.layer_norm(p, 1e-5)),
            ("softmax", |t, p| t.softmax(p, None).unwrap()),
        ];
        for (name, op) in ops {
            let r = grad_check(
                |t, p| {
                    let y = op(t, p);
                    let z = t.mul_const(y, w.clone())?;
                    Ok(t.sum(z))
                },
                &x,
                DEFAULT_STEP,
            )
            .unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "{}: {:?}", name, r);
        }
    }

    #[test]
    fn sparse_attention_gradients_with_frozen_selection(seed in any::<u64>(), l in 2usize..9, causal in any::<bool>()) {
        let d = 4;
        let qkv = tensor(seed, &[3 * l * d], 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 10);
        let w: Arc<[f64]> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = grad_check(
            |t, p| {
                let mut parts = Vec::new();
                for i in 0..3 {
                    let s = t.slice(p, 0, i * l * d, l * d)?;
                    parts.push(t.reshape(s, &[1, l, d])?);
                }
                let kind = AttentionKind::ProbSparse { c_factor: 1.0 };
                let y = attention(t, parts[0], parts[1], parts[2], kind, causal)?;
                let z = t.mul_const(y, w.clone())?;
                Ok(t.sum(z))
            },
            &qkv,
            DEFAULT_STEP,
        )
        .unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }
}

#[test]
fn two_step_causal_decode_matches_hand_computation() {
    let q = Tensor::new(vec![1, 2, 2], vec![0.3, -0.2, 1.1, 0.4]).unwrap();
    let k = Tensor::new(vec![1, 2, 2], vec![0.5, 0.9, -0.7, 0.2]).unwrap();
    let v = Tensor::new(vec![1, 2, 1], vec![2.0, -1.0]).unwrap();
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let out = attention(&mut tape, qv, kv, vv, AttentionKind::Full, true).unwrap();
    let got = tape.value(out).data().to_vec();

    let scale = 1.0 / 2f64.sqrt();
    let s10 = (1.1 * 0.5 + 0.4 * 0.9) * scale;
    let s11 = (1.1 * -0.7 + 0.4 * 0.2) * scale;
    let (e0, e1) = (s10.exp(), s11.exp());
    let row1 = (e0 * 2.0 + e1 * -1.0) / (e0 + e1);
    assert_eq!(got[0], 2.0);
    assert!((got[1] - row1).abs() < 1e-14, "{} vs {row1}", got[1]);
}
