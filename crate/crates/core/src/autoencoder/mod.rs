//! Dirichlet graph auto-encoder (DGAE).
//!
//! The encoder reads only observed sensors on the observed subgraph, latent
//! propagation fills in embeddings for every other node of the full graph,
//! and the decoder maps all embeddings back to speeds. Both encoder and
//! decoder are a single diffusion block:
//!
//! ```text
//! h = X W_in + b_in
//! u = h + S_cog h W_cog + S_free h W_free
//! out = relu(u) W_out + b_out
//! ```

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, FORMAT_VERSION};
pub(crate) use checkpoint::write_atomic;
pub use model::{
    augment_features, decode, encode, extend_latent, forward, forward_normalized, forward_with,
    latent_config, loss_and_gradients, GraphOperators, SignalWindow,
};
pub use params::{Block, ModelConfig, ModelParams, NormStats};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{tests::random_graph, NodePartition, WeightedDigraph};
    use crate::propagation::{propagate, propagate_closed_form_channels, InitPolicy, PropagationConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(l: usize, h: usize, d: usize) -> ModelConfig {
        ModelConfig {
            window_len: l,
            hidden: h,
            latent: d,
            time_dim: 4,
            mask_dim: 4,
            alpha: 0.3,
            k_max: 2,
            latent_iters: 40,
            train_latent_iters: 15,
            norm: NormStats { mean: 55.0, std: 10.0 },
        }
    }

    /// Random-bias variant so every code path carries signal.
    fn random_params(cfg: ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (name, a) in p.arrays_mut() {
            if name.ends_with("_b") {
                a.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
        p
    }

    fn window(n: usize, l: usize, observed: &[usize], seed: u64) -> SignalWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((n, l), |_| rng.random_range(20.0..70.0));
        let mask = Array2::from_shape_fn((n, l), |_| rng.random::<f64>() > 0.15);
        SignalWindow {
            values,
            mask,
            slot_of_day: rng.random_range(0..288),
            partition: NodePartition::new(n, observed).unwrap(),
            start: 0,
        }
    }

    fn connected_graph(n: usize, seed: u64) -> WeightedDigraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, rng.random_range(0.2..1.0))).collect();
        let g = random_graph(n, 0.15, &mut rng);
        edges.extend(g.adjacency().triplets().filter(|&(i, j, _)| j != i + 1));
        WeightedDigraph::from_edges(n, &edges).unwrap()
    }

    fn ops(g: &WeightedDigraph, w: &SignalWindow, p: &ModelParams) -> (GraphOperators, GraphOperators) {
        let sub = g.induced_subgraph(w.partition.observed());
        (
            GraphOperators::for_model(g, p).unwrap(),
            GraphOperators::for_model(&sub, p).unwrap(),
        )
    }

    #[test]
    fn augment_shape_and_identity_free() {
        let p = random_params(small_config(6, 8, 3), 1);
        let mut w = window(4, 6, &[0, 1, 3], 2);
        w.slot_of_day = 0;
        w.mask.fill(true);
        let row = w.values.row(0).to_owned();
        w.values.row_mut(1).assign(&row);
        let aug = augment_features(&w, &p).unwrap();
        assert_eq!(aug.dim(), (3, 6 + 4 + 4));
        assert_eq!(aug.row(0), aug.row(1));
        assert_eq!(aug.row(0).slice(ndarray::s![6..10]), p.time_table.row(0));
        w.slot_of_day = 288;
        assert!(augment_features(&w, &p).is_err());
    }

    #[test]
    fn mask_embedding_is_not_degenerate() {
        let p = ModelParams::init(small_config(6, 8, 3), 5).unwrap();
        let mut w = window(2, 6, &[0, 1], 3);
        w.mask.row_mut(0).fill(false);
        w.mask.row_mut(1).fill(true);
        let aug = augment_features(&w, &p).unwrap();
        assert_ne!(aug.row(0).slice(ndarray::s![10..]), aug.row(1).slice(ndarray::s![10..]));
    }

    #[test]
    fn encode_single_node_and_zero_input() {
        let p = random_params(small_config(4, 8, 3), 7);
        let g1 = WeightedDigraph::from_edges(1, &[]).unwrap();
        let o = GraphOperators::for_model(&g1, &p).unwrap();
        let aug = Array2::from_shape_fn((1, p.config.input_width()), |(_, j)| j as f64 * 0.1);
        let z = encode(&p, aug.view(), &o).unwrap();
        let e = &p.encoder;
        let expect = (aug.dot(&e.w_in) + &e.b_in).mapv(|v: f64| v.max(0.0)).dot(&e.w_out) + &e.b_out;
        for (a, b) in z.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let mut p0 = p.clone();
        for (name, a) in p0.arrays_mut() {
            if name.ends_with("_b") {
                a.fill(0.0);
            }
        }
        let g = connected_graph(5, 1);
        let o = GraphOperators::for_model(&g, &p0).unwrap();
        let z = encode(&p0, Array2::zeros((5, p0.config.input_width())).view(), &o).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_decode_equivariance() {
        let p = random_params(small_config(4, 8, 3), 9);
        let g = connected_graph(7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((7, p.config.input_width()), |_| rng.random_range(-1.0..1.0));
        let order = [3, 0, 6, 2, 5, 1, 4];
        let gp = g.permuted(&order);
        let xp = x.select(Axis(0), &order);
        let z = encode(&p, x.view(), &GraphOperators::for_model(&g, &p).unwrap()).unwrap();
        let zp = encode(&p, xp.view(), &GraphOperators::for_model(&gp, &p).unwrap()).unwrap();
        for (a, b) in z.select(Axis(0), &order).iter().zip(zp.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let y = decode(&p, z.view(), &GraphOperators::for_model(&g, &p).unwrap()).unwrap();
        let yp = decode(&p, zp.view(), &GraphOperators::for_model(&gp, &p).unwrap()).unwrap();
        assert_eq!(y.dim(), (7, 4));
        for (a, b) in y.select(Axis(0), &order).iter().zip(yp.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn decode_zero_is_dataset_mean() {
        let mut p = random_params(small_config(4, 8, 3), 2);
        for (name, a) in p.arrays_mut() {
            if name.ends_with("_b") {
                a.fill(0.0);
            }
        }
        let g = connected_graph(6, 2);
        let o = GraphOperators::for_model(&g, &p).unwrap();
        let y = decode(&p, Array2::zeros((6, 3)).view(), &o).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(y.mapv(|z| p.config.norm.denormalize(z)).iter().all(|&v| v == 55.0));
        assert!(decode(&p, Array2::zeros((5, 3)).view(), &o).is_err());
    }

    #[test]
    fn extend_latent_matches_scalar_and_closed_form() {
        let g = connected_graph(20, 6);
        let part = NodePartition::new(20, &[0, 3, 7, 11, 15, 19]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z_obs = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let cfg = latent_config(2000);
        let z = extend_latent(z_obs.view(), &g, &part, &cfg).unwrap();
        for (k, &o) in part.observed().iter().enumerate() {
            assert_eq!(z.row(o), z_obs.row(k));
        }
        let exact = propagate_closed_form_channels(&g, &part, z_obs.view()).unwrap();
        for (a, b) in z.iter().zip(exact.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
        // D = 1 is scalar propagation
        let col = z_obs.column(1).to_vec();
        let scalar = propagate(
            &g,
            &part,
            &col,
            &PropagationConfig {
                max_iters: 2000,
                tolerance: 0.0,
                init: InitPolicy::Zeros,
                ..Default::default()
            },
        )
        .unwrap();
        let one = extend_latent(z_obs.column(1).insert_axis(Axis(1)), &g, &part, &cfg).unwrap();
        assert_eq!(one.column(0).to_vec(), scalar.values);
        // constant channel stays constant
        let c = Array2::from_elem((6, 1), 2.5);
        let zc = extend_latent(c.view(), &g, &part, &cfg).unwrap();
        assert!(zc.iter().all(|&v| (v - 2.5).abs() < 1e-9));
    }

    #[test]
    fn forward_determinism_and_full_observation() {
        let p = random_params(small_config(4, 8, 3), 3);
        let g = connected_graph(9, 3);
        let w = window(9, 4, &[0, 2, 4, 6, 8], 5);
        let sub = g.induced_subgraph(w.partition.observed());
        let lat = latent_config(30);
        let a = forward(&p, &w, &g, &sub, &lat).unwrap();
        let b = forward(&p, &w, &g, &sub, &lat).unwrap();
        assert_eq!(a.dim(), (9, 4));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let all: Vec<usize> = (0..9).collect();
        let wf = window(9, 4, &all, 5);
        let y = forward(&p, &wf, &g, &g, &lat).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_permutation_equivariance() {
        let p = random_params(small_config(4, 8, 3), 13);
        let g = connected_graph(8, 8);
        let w = window(8, 4, &[1, 2, 5, 7], 8);
        let order = [7, 3, 1, 0, 6, 2, 4, 5];
        let gp = g.permuted(&order);
        let inv: Vec<usize> = (0..8).map(|i| order.iter().position(|&o| o == i).unwrap()).collect();
        let obs_p: Vec<usize> = w.partition.observed().iter().map(|&o| inv[o]).collect();
        let wp = SignalWindow {
            values: w.values.select(Axis(0), &order),
            mask: w.mask.select(Axis(0), &order),
            slot_of_day: w.slot_of_day,
            partition: NodePartition::new(8, &obs_p).unwrap(),
            start: 0,
        };
        let lat = latent_config(25);
        let y = forward(&p, &w, &g, &g.induced_subgraph(w.partition.observed()), &lat).unwrap();
        let yp = forward(&p, &wp, &gp, &gp.induced_subgraph(wp.partition.observed()), &lat).unwrap();
        for (a, b) in y.select(Axis(0), &order).iter().zip(yp.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    fn fd_check(seed: u64) {
        let p = random_params(small_config(4, 8, 3), seed);
        let g = connected_graph(10, seed);
        let w = window(10, 4, &[0, 2, 3, 5, 8, 9], seed + 100);
        let (full, obs) = ops(&g, &w, &p);
        let lat = latent_config(12);
        let targets = w.values.clone();
        let eval = Array2::from_shape_fn((10, 4), |(i, t)| !w.partition.is_observed(i) && w.mask[[i, t]]);
        let (_, grad) = loss_and_gradients(&p, &w, targets.view(), eval.view(), &full, &obs, &lat).unwrap();
        let eps = 1e-4;
        let names: Vec<&str> = p.arrays().iter().map(|(n, _)| *n).collect();
        for (k, name) in names.iter().enumerate() {
            let an = grad.arrays()[k].1.clone();
            let mut fd = Array2::<f64>::zeros(an.dim());
            for idx in 0..an.len() {
                let (r, c) = (idx / an.ncols(), idx % an.ncols());
                if *name == "timestamp_table" && r != w.slot_of_day {
                    continue;
                }
                let mut q = p.clone();
                q.arrays_mut()[k].1[[r, c]] += eps;
                let lp = loss_and_gradients(&q, &w, targets.view(), eval.view(), &full, &obs, &lat).unwrap().0;
                q.arrays_mut()[k].1[[r, c]] -= 2.0 * eps;
                let lm = loss_and_gradients(&q, &w, targets.view(), eval.view(), &full, &obs, &lat).unwrap().0;
                fd[[r, c]] = (lp - lm) / (2.0 * eps);
            }
            let diff = (&an - &fd).mapv(|v| v * v).sum().sqrt();
            let scale = an.mapv(|v| v * v).sum().sqrt().max(fd.mapv(|v| v * v).sum().sqrt());
            assert!(scale > 0.0, "{name}: zero gradient");
            assert!(diff / scale <= 1e-3, "{name}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1, 2] {
            fd_check(seed);
        }
    }

    #[test]
    fn loss_properties() {
        let p = random_params(small_config(4, 8, 3), 4);
        let g = connected_graph(10, 4);
        let w = window(10, 4, &[0, 4, 9], 4);
        let (full, obs) = ops(&g, &w, &p);
        let lat = latent_config(10);
        let y = forward_with(&p, &w, &full, &obs, &lat).unwrap();
        let eval = Array2::from_elem((10, 4), true);
        let (loss, grad) = loss_and_gradients(&p, &w, y.view(), eval.view(), &full, &obs, &lat).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.arrays().iter().all(|(_, a)| a.iter().all(|v| v.abs() < 1e-9)));

        let shifted = y.mapv(|v| v + 3.0);
        let shifted2 = y.mapv(|v| v + 6.0);
        let l1 = loss_and_gradients(&p, &w, shifted.view(), eval.view(), &full, &obs, &lat).unwrap().0;
        let l2 = loss_and_gradients(&p, &w, shifted2.view(), eval.view(), &full, &obs, &lat).unwrap().0;
        assert_abs_diff_eq!(l2, 4.0 * l1, epsilon = 1e-9);

        let none = Array2::from_elem((10, 4), false);
        assert!(loss_and_gradients(&p, &w, y.view(), none.view(), &full, &obs, &lat).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = random_params(small_config(4, 8, 3), 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        let bytes = to_bytes(&q);
        assert_eq!(bytes, std::fs::read(&path).unwrap());
        assert_eq!(q.config, p.config);

        // configured L differs from the checkpoint
        let mut other = p.config.clone();
        other.window_len = 12;
        match q.check_config(&other) {
            Err(crate::Error::Checkpoint { array, .. }) => assert_eq!(array, "enc_in_w"),
            e => panic!("unexpected {e:?}"),
        }

        // truncated data
        let cut = &bytes[..bytes.len() - 3];
        match from_bytes(cut) {
            Err(crate::Error::Checkpoint { array, .. }) => assert_eq!(array, "mask_b"),
            e => panic!("unexpected {e:?}"),
        }
        // unknown version
        let mut bad = bytes.clone();
        bad[4] = b'9';
        assert!(from_bytes(&bad).is_err());
        // tampered shape
        let header_end = bytes.windows(4).position(|w| w == b"end\n").unwrap();
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let mut tampered = header.replace("array dec_out_w 8 4", "array dec_out_w 8 5").into_bytes();
        tampered.extend_from_slice(&bytes[header_end..]);
        match from_bytes(&tampered) {
            Err(crate::Error::Checkpoint { array, .. }) => assert_eq!(array, "dec_out_w"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn inductive_across_graph_sizes() {
        let p = random_params(small_config(4, 8, 3), 21);
        for n in [5, 13, 30] {
            let g = connected_graph(n, n as u64);
            let obs: Vec<usize> = (0..n).step_by(3).collect();
            let w = window(n, 4, &obs, n as u64);
            let y = forward(&p, &w, &g, &g.induced_subgraph(&obs), &latent_config(20)).unwrap();
            assert_eq!(y.dim(), (n, 4));
        }
    }

    #[test]
    fn norm_round_trip() {
        let n = NormStats::from_values([40.0, 50.0, 60.0, f64::NAN]).unwrap();
        for v in [0.0, 33.3, 71.25] {
            let back = n.denormalize(n.normalize(v));
            assert!((back - v).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
}
