//! Structural properties of the three flow architectures.

use gnflow_core::flows::{gcn_encode, read_checkpoint, write_checkpoint, Architecture, FlowConfig, FlowModel};
use gnflow_core::graphs::{normalize_adjacency, random_dag, DagMatrix};
use gnflow_diffcore::{spectral_norm, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lim: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-lim..lim))
}

fn small_config(arch: Architecture, n: usize, d: usize) -> FlowConfig {
    let mut c = FlowConfig::new(arch, n, d);
    c.hidden = 12;
    c.gcn_hidden = 6;
    c
}

fn model_with_graph(arch: Architecture, n: usize, d: usize, seed: u64) -> FlowModel {
    let mut m = FlowModel::new(small_config(arch, n, d), seed).unwrap();
    m.set_adjacency(&random_dag(n, 0.6, seed).unwrap()).unwrap();
    m
}

/// Straight-line `Â relu(Â X W) U` with explicit loops.
fn naive_gcn(ahat: &Tensor, x: &Tensor, w: &Tensor, u: &Tensor) -> Tensor {
    let n = x.rows();
    let mm = |a: &Tensor, b: &Tensor| {
        let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    };
    let h = mm(&mm(ahat, x), w).map(|v| if v > 0.0 { v } else { 0.0 });
    let out = mm(&mm(ahat, &h), u);
    assert_eq!(out.rows(), n);
    out
}

#[test]
fn gcn_identity_case() {
    let x = Tensor::from_rows(&[[0.5, 1.0], [2.0, 0.0], [0.0, 3.0]]);
    let y = gcn_encode(&DagMatrix::zeros(3), &x, &Tensor::eye(2), &Tensor::eye(2)).unwrap();
    assert_eq!(y, x);
    assert!(gcn_encode(&DagMatrix::zeros(2), &x, &Tensor::eye(2), &Tensor::eye(2)).is_err());
}

#[test]
fn gcn_matches_naive_oracle_and_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..20 {
        let n = rng.random_range(2..8);
        let a = random_dag(n, 0.5, k).unwrap();
        let x = random(&mut rng, n, 3, 2.0);
        let w = random(&mut rng, 3, 5, 1.0);
        let u = random(&mut rng, 5, 2, 1.0);
        let y = gcn_encode(&a, &x, &w, &u).unwrap();
        let oracle = naive_gcn(&normalize_adjacency(&a).hat, &x, &w, &u);
        assert!(y.max_abs_diff(&oracle) < 1e-12);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let px = Tensor::from_fn(n, 3, |i, j| x.get(perm[i], j));
        let py = gcn_encode(&a.permuted(&perm).unwrap(), &px, &w, &u).unwrap();
        let expected = Tensor::from_fn(n, 2, |i, j| y.get(perm[i], j));
        assert!(py.max_abs_diff(&expected) < 1e-12);
    }
}

#[test]
fn initial_condition_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for arch in Architecture::ALL {
        for (n, d) in [(3, 1), (4, 2), (2, 3)] {
            let m = model_with_graph(arch, n, d, rng.random());
            let x = random(&mut rng, n, d, 3.0);
            assert_eq!(m.evaluate(0.0, &x).unwrap(), x, "{arch} n={n} d={d}");
            assert!(m.evaluate(0.7, &x).unwrap() != x);
        }
    }
}

#[test]
fn graph_ablation_reproduces_plain_resnet_flow() {
    let (n, d) = (4, 2);
    let mut graph = model_with_graph(Architecture::Resnet, n, d, 5);
    let mut cfg = small_config(Architecture::Resnet, n, d);
    cfg.graph = false;
    let mut plain = FlowModel::new(cfg, 99).unwrap();

    // Zero the rows of the first mlp1 layer that read X̃, then copy every
    // shared weight into the graph-free model.
    let id = graph.store().find("block0.mlp1.0.weight").unwrap();
    graph.store_mut().update(id, |w| {
        for r in d..2 * d {
            for c in 0..w.cols() {
                w.set(r, c, 0.0);
            }
        }
    });
    for pid in plain.store().ids().collect::<Vec<_>>() {
        let name = plain.store().name(pid).to_string();
        let src = graph.store().get(graph.store().find(&name).unwrap()).clone();
        let value = if name == "block0.mlp1.0.weight" {
            Tensor::from_fn(d + 1, src.cols(), |r, c| if r < d { src.get(r, c) } else { src.get(r + d, c) })
        } else {
            src
        };
        plain.store_mut().set(pid, value).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let x = random(&mut rng, n, d, 2.0);
        let t = rng.random_range(0.0..10.0);
        assert_eq!(graph.evaluate(t, &x).unwrap(), plain.evaluate(t, &x).unwrap());
    }
}

#[test]
fn coupling_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (n, d) in [(3, 1), (4, 2), (3, 3), (5, 4)] {
        let m = model_with_graph(Architecture::Coupling, n, d, rng.random());
        let w = m.config().working_width();
        for _ in 0..10 {
            let x = random(&mut rng, n, w, 2.0);
            let t = rng.random_range(0.0..10.0);
            let y = m.coupling_forward(t, &x).unwrap();
            let back = m.invert_coupling(t, &y).unwrap();
            assert!(back.max_abs_diff(&x) <= 1e-10, "n={n} d={d}: {}", back.max_abs_diff(&x));
            assert_eq!(m.invert_coupling(0.0, &x).unwrap(), x);
        }
    }
}

#[test]
fn coupling_pure_rescaling_is_inverted_exactly() {
    let (n, d) = (3, 2);
    let mut cfg = small_config(Architecture::Coupling, n, d);
    cfg.blocks = 1;
    let mut m = FlowModel::new(cfg, 3).unwrap();
    m.set_adjacency(&random_dag(n, 0.6, 3).unwrap()).unwrap();
    // v-head zeroed, u-head constant: only the trunk bias feeds u after
    // zeroing the trunk weights, so u is the same for every row.
    let ids: Vec<_> = m.store().ids().collect();
    for id in ids {
        let name = m.store().name(id).to_string();
        if name.contains("mlp4") || (name.contains("weight") && (name.contains("mlp1") || name.contains("mlp2"))) {
            m.store_mut().update(id, |w| w.data_mut().fill(0.0));
        }
    }
    let x = Tensor::from_rows(&[[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]]);
    let y = m.coupling_forward(1.3, &x).unwrap();
    let ratio = y.get(0, 0) / x.get(0, 0);
    assert!((y.get(1, 0) / x.get(1, 0) - ratio).abs() < 1e-12);
    assert_eq!(y.get(0, 1), x.get(0, 1));
    assert!(m.invert_coupling(1.3, &y).unwrap().max_abs_diff(&x) <= 1e-15);
}

#[test]
fn single_feature_coupling_has_regression_shape() {
    let m = model_with_graph(Architecture::Coupling, 5, 1, 8);
    let x = Tensor::from_fn(5, 1, |i, _| i as f64 - 2.0);
    let y = m.evaluate(2.5, &x).unwrap();
    assert_eq!(y.shape(), &[5, 1]);
    assert!(y.all_finite());
    assert_eq!(m.config().working_width(), 2);
}

#[test]
fn flows_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for arch in Architecture::ALL {
        let (n, d) = (5, 2);
        let m = model_with_graph(arch, n, d, rng.random());
        let a = m.adjacency().unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut pm = m.clone();
        pm.set_adjacency(&a.permuted(&perm).unwrap()).unwrap();
        let x = random(&mut rng, n, d, 2.0);
        let px = Tensor::from_fn(n, d, |i, j| x.get(perm[i], j));
        let y = m.evaluate(1.7, &x).unwrap();
        let py = pm.evaluate(1.7, &px).unwrap();
        let expected = Tensor::from_fn(n, d, |i, j| y.get(perm[i], j));
        assert!(py.max_abs_diff(&expected) < 1e-12, "{arch}");
    }
}

fn frob_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().frobenius()
}

#[test]
fn contraction_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for arch in [Architecture::Resnet, Architecture::Gru] {
        let (n, d) = (4, 2);
        let m = model_with_graph(arch, n, d, rng.random());
        for _ in 0..500 {
            let x = random(&mut rng, n, d, 2.0);
            let y = random(&mut rng, n, d, 2.0);
            let t = rng.random_range(0.0..10.0);
            let gx = m.residual(t, &x).unwrap();
            let gy = m.residual(t, &y).unwrap();
            assert!(frob_diff(&gx, &gy) <= 0.99 * frob_diff(&x, &y), "{arch}");
        }
    }
}

#[test]
fn enforce_contraction_clips_scaled_weights() {
    let mut m = model_with_graph(Architecture::Resnet, 3, 2, 11);
    let before = m.store().clone();
    m.enforce_contraction().unwrap();
    for id in m.store().ids() {
        assert_eq!(m.store().get(id), before.get(id), "compliant params must not change");
    }
    for (id, _) in m.clipped_weights() {
        m.store_mut().update(id, |w| *w = w.scale(10.0));
    }
    m.enforce_contraction().unwrap();
    for (id, bound) in m.clipped_weights() {
        assert!(bound <= 0.9);
        assert!(spectral_norm(m.store().get(id), 500).unwrap() <= bound + 1e-9);
    }
}

#[test]
fn gcn_path_lipschitz_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = model_with_graph(Architecture::Resnet, 5, 2, 12);
    let a = m.adjacency().unwrap();
    let w = m.store().get(m.store().find("block0.gcn.w").unwrap()).clone();
    let u = m.store().get(m.store().find("block0.gcn.u").unwrap()).clone();
    let bound = m.config().lipschitz_bound;
    for _ in 0..1000 {
        let x = random(&mut rng, 5, 2, 2.0);
        let y = random(&mut rng, 5, 2, 2.0);
        let gx = gcn_encode(&a, &x, &w, &u).unwrap();
        let gy = gcn_encode(&a, &y, &w, &u).unwrap();
        assert!(frob_diff(&gx, &gy) <= 4.0 * bound * bound * frob_diff(&x, &y));
        assert!(frob_diff(&gx, &gy) <= bound * frob_diff(&x, &y) + 1e-12);
    }
}

#[test]
fn masked_graph_matches_extracted_subgraph() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, d) = (6, 2);
    let mask = [true, false, true, true, false, true];
    let keep: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    for arch in Architecture::ALL {
        let m = model_with_graph(arch, n, d, rng.random());
        let ahat = normalize_adjacency(&m.adjacency().unwrap()).hat;
        let sub_ahat = Tensor::from_fn(keep.len(), keep.len(), |i, j| ahat.get(keep[i], keep[j]));
        let x = random(&mut rng, n, d, 2.0);
        let xs = Tensor::from_fn(keep.len(), d, |i, j| x.get(keep[i], j));

        let full_out = {
            let mut tape = Tape::new();
            let bound = m.store().bind(&mut tape);
            let a = tape.constant(ahat.clone());
            let xv = tape.constant(x.clone());
            let y = m.forward_with(&mut tape, &bound, Some(a), xv, &[1.1; 6], Some(&mask)).unwrap();
            tape.value(y).clone()
        };
        // Same weights evaluated on the extracted subgraph.
        let sub_out = {
            let mut cfg = m.config().clone();
            cfg.nodes = keep.len();
            let mut sub = FlowModel::new(cfg, 0).unwrap();
            for id in sub.store().ids().collect::<Vec<_>>() {
                let name = sub.store().name(id).to_string();
                if name != "adjacency" {
                    let v = m.store().get(m.store().find(&name).unwrap()).clone();
                    sub.store_mut().set(id, v).unwrap();
                }
            }
            let mut tape = Tape::new();
            let bound = sub.store().bind(&mut tape);
            let a = tape.constant(sub_ahat.clone());
            let xv = tape.constant(xs.clone());
            let y = sub.forward_with(&mut tape, &bound, Some(a), xv, &[1.1; 4], None).unwrap();
            tape.value(y).clone()
        };
        for (k, &i) in keep.iter().enumerate() {
            for j in 0..d {
                assert!((full_out.get(i, j) - sub_out.get(k, j)).abs() < 1e-12, "{arch}");
            }
        }
    }
}

#[test]
fn predict_matches_rowwise_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for arch in Architecture::ALL {
        let (n, d) = (3, 2);
        let m = model_with_graph(arch, n, d, rng.random());
        let x0 = random(&mut rng, 2 * n, d, 2.0);
        let times: Vec<Vec<f64>> = vec![vec![0.0, 0.5, 3.0], vec![1.0, 9.0]];
        let refs: Vec<&[f64]> = times.iter().map(|t| t.as_slice()).collect();
        let mut tape = Tape::new();
        let bound = m.store().bind(&mut tape);
        let x0v = tape.constant(x0.clone());
        let pred = m.predict(&mut tape, &bound, x0v, &refs).unwrap();
        let pred = tape.value(pred).clone();
        let mut r = 0;
        for (s, ts) in times.iter().enumerate() {
            let xs = Tensor::from_fn(n, d, |i, j| x0.get(s * n + i, j));
            for &t in ts {
                let y = m.evaluate(t, &xs).unwrap();
                for i in 0..n {
                    for j in 0..d {
                        assert!((pred.get(r + i, j) - y.get(i, j)).abs() < 1e-13, "{arch}");
                    }
                }
                r += n;
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    for arch in Architecture::ALL {
        let m = model_with_graph(arch, 4, 2, 15);
        let extra = vec![("split_seed".to_string(), "42".to_string())];
        let text = write_checkpoint(&m, &extra);
        assert!(text.starts_with(&format!("gnflow-v1 {arch} 4 2 12\n")));
        let (back, got) = read_checkpoint(&text).unwrap();
        assert_eq!(got, extra);
        assert_eq!(back.config(), m.config());
        assert_eq!(back.store().len(), m.store().len());
        for id in m.store().ids() {
            assert_eq!(back.store().get(id), m.store().get(id));
        }
        assert!(read_checkpoint(&text.replacen("gnflow-v1", "gnflow-v9", 1)).is_err());
    }
}
