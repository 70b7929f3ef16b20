//! Latent heads against Monte-Carlo and finite-difference oracles.

use gnflow_core::dynamics::{apply_missingness, sample_dataset, SystemKind, SystemSpec, Trajectory, TrajectoryBatch};
use gnflow_core::graphs::random_dag;
use gnflow_core::latent::*;
use gnflow_core::training::Objective;
use gnflow_diffcore::{grad, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny(approach: LatentApproach, graph: bool) -> (LatentModel, TrajectoryBatch) {
    let dag = random_dag(3, 0.6, 1).unwrap();
    let spec = SystemSpec::new(SystemKind::Triangle, dag.clone()).unwrap();
    let mut data = sample_dataset(&spec, 2, 3, 1).unwrap();
    apply_missingness(&mut data, 0.3, 2).unwrap();
    for s in &mut data.samples {
        s.mask[0] = true;
        s.values.set(0, 0, 0.25);
    }
    let mut cfg = LatentConfig::new(approach, 3, 1);
    cfg.hidden = 3;
    cfg.latent = 2;
    cfg.flow_hidden = 4;
    cfg.gcn_hidden = 3;
    cfg.graph = graph;
    let mut model = LatentModel::new(cfg, 5).unwrap();
    if graph {
        model.set_adjacency(&dag).unwrap();
    }
    (model, data)
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m1, l1, m2, l2) = (0.4, -0.3, -0.2, 0.25);
    let (s1, s2) = (f64::exp(l1), f64::exp(l2));
    let draws = 1_000_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let e: f64 = StandardNormal.sample(&mut rng);
        let x = m1 + s1 * e;
        // log q(x) − log p(x)
        let lq = -l1 - 0.5 * ((x - m1) / s1).powi(2);
        let lp = -l2 - 0.5 * ((x - m2) / s2).powi(2);
        let v = lq - lp;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / draws as f64;
    let se = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
    let closed = gaussian_kl(m1, l1, m2, l2);
    assert!((mean - closed).abs() <= 3.0 * se, "MC {mean} ± {se} vs {closed}");
}

#[test]
fn reparameterised_samples_average_to_the_mean() {
    let params = GaussianParams {
        mu: Tensor::from_rows(&[[0.5, -1.0, 2.0]]),
        log_sigma: Tensor::from_rows(&[[0.0, -0.5, 0.3]]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 100_000;
    let mut sum = [0.0; 3];
    for _ in 0..draws {
        let z = params.sample(&mut rng);
        for (s, v) in sum.iter_mut().zip(z.data()) {
            *s += v;
        }
    }
    let sigma = params.sigma();
    for k in 0..3 {
        let se = sigma.data()[k] / (draws as f64).sqrt();
        let mean = sum[k] / draws as f64;
        assert!((mean - params.mu.data()[k]).abs() <= 3.0 * se);
    }
}

fn check_gradient(model: &LatentModel, batch: &[&Trajectory], tol: f64) {
    let loss_of = |m: &LatentModel| {
        let mut tape = Tape::new();
        let bound = m.store().bind(&mut tape);
        let l = m.batch_loss(&mut tape, &bound, batch, 99).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let loss = model.batch_loss(&mut tape, &bound, batch, 99).unwrap();
    let grads = grad(&tape, loss, &bound, model.store()).unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for id in model.store().ids() {
        for k in 0..model.store().get(id).len() {
            let mut plus = model.clone();
            plus.store_mut().update(id, |t| t.data_mut()[k] += h);
            let mut minus = model.clone();
            minus.store_mut().update(id, |t| t.data_mut()[k] -= h);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grads[id.index()].data()[k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            assert!(rel <= tol, "{}[{k}]: analytic {an} vs fd {fd}", model.store().name(id));
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn elbo_gradient_matches_finite_differences_with_fixed_noise() {
    let (model, data) = tiny(LatentApproach::Smoothing, true);
    let batch: Vec<&Trajectory> = data.samples.iter().collect();
    check_gradient(&model, &batch, 1e-3);
}

#[test]
fn filter_gradient_matches_finite_differences() {
    let (model, data) = tiny(LatentApproach::Filtering, true);
    let batch: Vec<&Trajectory> = data.samples.iter().collect();
    check_gradient(&model, &batch, 1e-3);
}

#[test]
fn zero_elapsed_time_with_identity_projection_keeps_h() {
    let (mut model, _) = tiny(LatentApproach::Filtering, true);
    let proj = model.projection().weight;
    // [I; 0] picks the first half of H ‖ H̃.
    model
        .store_mut()
        .set(proj, Tensor::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 }))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h0 = Tensor::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    let ht0 = Tensor::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let pair = HiddenPair {
        h: tape.constant(h0.clone()),
        h_tilde: Some(tape.constant(ht0)),
    };
    let out = model.evolve_hidden(&mut tape, &bound, pair, &[0.0; 6]).unwrap();
    assert_eq!(tape.value(out), &h0);
}

#[test]
fn evolved_states_keep_width_and_stay_finite() {
    let (model, _) = tiny(LatentApproach::Smoothing, true);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let h = Tensor::from_fn(3, 3, |_, _| rng.random_range(-50.0..50.0));
        let ht = Tensor::from_fn(3, 3, |_, _| rng.random_range(-50.0..50.0));
        let dt: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut tape = Tape::new();
        let bound = model.store().bind(&mut tape);
        let pair = HiddenPair {
            h: tape.constant(h),
            h_tilde: Some(tape.constant(ht)),
        };
        let out = model.evolve_hidden(&mut tape, &bound, pair, &dt).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 3]);
        assert!(tape.value(out).all_finite());
    }
}

#[test]
fn masked_row_gets_no_graph_update() {
    let (model, _) = tiny(LatentApproach::Filtering, true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = Tensor::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let ht = Tensor::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let mut x = Tensor::from_rows(&[[0.3], [0.7], [-0.2]]);
    x.set(0, 0, f64::NAN);
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let pair = HiddenPair {
        h: tape.constant(h),
        h_tilde: Some(tape.constant(ht.clone())),
    };
    let a = model.adjacency_param().unwrap();
    let ahat = gnflow_core::graphs::normalize_adjacency_var(&mut tape, bound.var(a)).unwrap();
    let (next, (_, ls_obs), (_, ls_post)) = model
        .filter_step(&mut tape, &bound, pair, Some(ahat), &x, &[false, true, true], &[0.5; 3])
        .unwrap();
    let new_ht = tape.value(next.h_tilde.unwrap());
    assert_eq!(new_ht.row(0), ht.row(0));
    assert_ne!(new_ht.row(1), ht.row(1));
    assert!(tape.value(next.h).all_finite());
    assert!(tape.value(ls_obs).map(f64::exp).data().iter().all(|s| *s > 0.0));
    assert!(tape.value(ls_post).all_finite());
}

#[test]
fn all_masked_sample_is_rejected() {
    let (model, mut data) = tiny(LatentApproach::Smoothing, false);
    data.samples[0].mask.iter_mut().for_each(|m| *m = false);
    assert!(model.smooth_encode(&[&data.samples[0]]).is_err());
    let ok = model.smooth_encode(&[&data.samples[1]]).unwrap();
    assert_eq!(ok.mu.shape(), &[3, 2]);
}

#[test]
fn encoder_direction_changes_the_posterior() {
    let (fwd, data) = tiny(LatentApproach::Smoothing, true);
    let mut cfg = fwd.config().clone();
    cfg.direction = EncoderDirection::Backward;
    let mut bwd = LatentModel::new(cfg, 5).unwrap();
    bwd.set_adjacency(&fwd.adjacency().unwrap()).unwrap();
    let batch: Vec<&Trajectory> = data.samples.iter().collect();
    assert_ne!(fwd.smooth_encode(&batch).unwrap(), bwd.smooth_encode(&batch).unwrap());
}

#[test]
fn config_round_trips() {
    let mut cfg = LatentConfig::new(LatentApproach::Filtering, 4, 2);
    cfg.direction = EncoderDirection::Backward;
    cfg.kl_weight = 0.25;
    let mut back = LatentConfig::new(LatentApproach::Smoothing, 1, 1);
    for (k, v) in cfg.to_pairs() {
        assert!(back.set(k, &v).unwrap());
    }
    assert_eq!(back, cfg);
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_only_at_equality(
        m1 in -3.0f64..3.0, l1 in -2.0f64..2.0, m2 in -3.0f64..3.0, l2 in -2.0f64..2.0,
    ) {
        let kl = gaussian_kl(m1, l1, m2, l2);
        prop_assert!(kl >= -1e-15);
        prop_assert!(gaussian_kl(m1, l1, m1, l1).abs() <= 1e-15);
        if (m1 - m2).abs() > 1e-3 || (l1 - l2).abs() > 1e-3 {
            prop_assert!(kl > 0.0);
        }
    }
}

