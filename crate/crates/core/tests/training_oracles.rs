//! Training loop invariants and loss oracles on tiny problems.

use gnflow_core::dynamics::{sample_dataset, SystemKind, SystemSpec, Trajectory, TrajectoryBatch};
use gnflow_core::flows::{Architecture, FlowModel};
use gnflow_core::graphs::{acyclicity_expm, random_dag, DagMatrix};
use gnflow_core::training::*;
use gnflow_core::Error;
use gnflow_diffcore::{grad, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_data(kind: SystemKind, n: usize, samples: usize, times: usize, seed: u64) -> TrajectoryBatch {
    let dag = random_dag(n, 0.5, seed).unwrap();
    let spec = SystemSpec::new(kind, dag).unwrap();
    sample_dataset(&spec, samples, times, seed).unwrap()
}

fn small_config(arch: Architecture, data: &TrajectoryBatch, mode: GraphMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_data(arch, data).with_seed(3);
    cfg.flow.hidden = 6;
    cfg.flow.gcn_hidden = 4;
    cfg.graph = mode;
    cfg.train.epochs = 4;
    cfg.train.patience = 2;
    cfg.train.batch_size = 4;
    cfg.train.al.max_outer = 3;
    cfg
}

#[test]
fn masked_loss_equals_subset_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = 200;
    let pred = Tensor::from_fn(rows, 2, |_, _| rng.random_range(-2.0..2.0));
    let mut target = Tensor::from_fn(rows, 2, |_, _| rng.random_range(-2.0..2.0));
    let mask: Vec<bool> = (0..rows).map(|_| !rng.random_bool(0.3)).collect();
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            target.set(r, 0, f64::NAN);
            target.set(r, 1, f64::NAN);
        }
    }
    let mut tape = Tape::new();
    let p = tape.variable(pred.clone());
    let loss = mse_loss(&mut tape, p, &target, &mask).unwrap();

    let kept: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    let mut subset = 0.0;
    for &r in &kept {
        for c in 0..2 {
            subset += (pred.get(r, c) - target.get(r, c)).powi(2);
        }
    }
    subset /= (kept.len() * 2) as f64;
    assert!((tape.value(loss).item() - subset).abs() <= 1e-12);

    let g = tape.backward(loss).unwrap();
    let gp = g.get(p).unwrap();
    for r in (0..rows).filter(|&r| !mask[r]) {
        assert_eq!(gp.row(r), &[0.0, 0.0]);
    }
}

#[test]
fn constraint_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut state = TrainState::new(AlConfig::default());
    state.lambda = 0.7;
    state.penalty = 3.0;
    for _ in 0..20 {
        let a = Tensor::from_fn(4, 4, |i, j| if i == j { 0.0 } else { rng.random_range(-0.8..0.8) });
        let f = |a: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.variable(a.clone());
            let (p, _) = constraint_penalty(&mut tape, v, &state).unwrap();
            tape.value(p).item()
        };
        let mut tape = Tape::new();
        let v = tape.variable(a.clone());
        let (p, _) = constraint_penalty(&mut tape, v, &state).unwrap();
        let g = tape.backward(p).unwrap().get(v).unwrap().clone();
        let h = 1e-6;
        for k in 0..16 {
            let mut plus = a.clone();
            plus.data_mut()[k] += h;
            let mut minus = a.clone();
            minus.data_mut()[k] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = g.data()[k];
            assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3) <= 1e-4, "{an} vs {fd}");
        }
    }
}

#[test]
fn zero_constraint_leaves_task_loss() {
    let state = TrainState::new(AlConfig::default());
    let mut tape = Tape::new();
    let task = tape.constant(Tensor::scalar(0.3));
    let a = tape.variable(DagMatrix::from_edges(3, &[(0, 1, 0.5), (1, 2, 0.4)]).unwrap().into_tensor());
    let (loss, h) = augmented_loss(&mut tape, task, a, &state).unwrap();
    assert_eq!(h, 0.0);
    assert_eq!(tape.value(loss).item(), 0.3);
}

#[test]
fn learned_mode_keeps_invariants() {
    let data = toy_data(SystemKind::Triangle, 3, 12, 5, 4);
    let cfg = small_config(Architecture::Resnet, &data, GraphMode::Learned);
    let run = run_experiment(&cfg, &data).unwrap();
    let a = run.learned.as_ref().unwrap().0.clone();
    for i in 0..3 {
        assert_eq!(a.get(i, i), 0.0);
    }
    let hist = &run.report.history;
    assert!(!hist.is_empty());
    for w in hist.windows(2) {
        if w[0].outer == w[1].outer {
            assert_eq!(w[0].lambda, w[1].lambda);
            assert_eq!(w[0].penalty, w[1].penalty);
        }
        assert!(w[1].penalty >= w[0].penalty);
    }
    assert_eq!(run.report.final_h.unwrap(), acyclicity_expm(&a));
}

#[test]
fn returned_parameters_are_the_best_validation_snapshot() {
    let data = toy_data(SystemKind::Sink, 3, 12, 5, 5);
    let mut cfg = small_config(Architecture::Gru, &data, GraphMode::None);
    cfg.train.epochs = 8;
    cfg.train.patience = 8;
    cfg.train.adam.lr = 0.05;
    let run = run_experiment(&cfg, &data).unwrap();
    let best = run
        .report
        .history
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    let val: Vec<&Trajectory> = run.split.val.iter().map(|&i| &data.samples[i]).collect();
    let now = evaluate_forecast(&run.model, &val).unwrap();
    assert_eq!(now, best);
    assert_eq!(run.report.best_val, best);
}

#[test]
fn graph_modes_none_and_truth() {
    let data = toy_data(SystemKind::Triangle, 3, 12, 5, 6);
    let none = run_experiment(&small_config(Architecture::Resnet, &data, GraphMode::None), &data).unwrap();
    assert!(none.model.adjacency_param().is_none());
    assert!(none.report.history.iter().all(|r| r.h == 0.0 && r.lambda == 0.0));
    assert_eq!(none.report.outer_iterations, 1);
    let again = run_experiment(&small_config(Architecture::Resnet, &data, GraphMode::None), &data).unwrap();
    assert_eq!(none.test_mse, again.test_mse);

    let truth = run_experiment(&small_config(Architecture::Coupling, &data, GraphMode::GroundTruth), &data).unwrap();
    assert_eq!(truth.model.adjacency().unwrap(), data.adjacency);
    assert!(truth.report.final_h.is_none());
    assert!(truth.report.history.iter().all(|r| r.h == 0.0));
}

#[test]
fn evaluation_is_repeatable_and_zero_for_identity_on_constant_data() {
    let mut data = toy_data(SystemKind::Triangle, 3, 4, 5, 7);
    for s in &mut data.samples {
        let rows: Vec<&[f64]> = (0..s.times.len() * 3).map(|r| s.initial.row(r % 3)).collect();
        s.values = Tensor::from_rows(&rows);
    }
    let cfg = small_config(Architecture::Resnet, &data, GraphMode::None);
    let mut model = build_model(&cfg, &data, None).unwrap();
    // Zeroing every output layer makes the residual vanish.
    let last: Vec<ParamId> = model
        .store()
        .ids()
        .filter(|&id| model.store().name(id).ends_with(".2.weight"))
        .collect();
    assert!(!last.is_empty());
    for id in last {
        model.store_mut().update(id, |w| w.data_mut().fill(0.0));
    }
    let all: Vec<&Trajectory> = data.samples.iter().collect();
    assert_eq!(evaluate_forecast(&model, &all).unwrap(), 0.0);

    let trained = build_model(&cfg, &data, None).unwrap();
    assert_eq!(
        evaluate_forecast(&trained, &all).unwrap(),
        evaluate_forecast(&trained, &all).unwrap()
    );
}

struct Exploding {
    store: ParamStore,
    w: ParamId,
}

impl Objective for Exploding {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn adjacency_param(&self) -> Option<ParamId> {
        None
    }
    fn batch_loss(&self, tape: &mut Tape, bound: &Bound, _batch: &[&Trajectory], _seed: u64) -> gnflow_core::Result<Var> {
        let w = bound.var(self.w);
        let e = tape.exp(w);
        let e = tape.exp(e);
        Ok(tape.sum(e))
    }
    fn validation_loss(&self, _samples: &[&Trajectory]) -> gnflow_core::Result<f64> {
        Ok(self.store.get(self.w).item())
    }
    /// Pushes `w` up geometrically so `exp(exp(w))` soon overflows.
    fn post_step(&mut self) -> gnflow_core::Result<()> {
        self.store.update(self.w, |w| w.data_mut()[0] = (w.data()[0].abs() + 1.0) * 3.0);
        Ok(())
    }
}

#[test]
fn divergence_aborts_with_history() {
    let data = toy_data(SystemKind::Triangle, 3, 4, 2, 8);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(0.0));
    let mut obj = Exploding { store, w };
    let refs: Vec<&Trajectory> = data.samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 50,
        patience: 50,
        batch_size: 1,
        ..TrainConfig::default()
    };
    match train(&mut obj, &refs[..2], &refs[2..], &cfg) {
        Err(Error::Diverged { history, .. }) => assert!(!history.is_empty()),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn experiment_config_round_trips_through_text() {
    let data = toy_data(SystemKind::Sink, 4, 2, 2, 9);
    let mut cfg = small_config(Architecture::Gru, &data, GraphMode::GroundTruth);
    cfg.split = [0.5, 0.25, 0.25];
    cfg.train.adam.lr = 0.0123;
    cfg.edge_threshold = 0.25;
    let text = cfg.to_text();
    let mut back = ExperimentConfig::new(Architecture::Resnet, 1, 1);
    back.apply_text(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(back.apply_text("bogus = 1").is_err());
    assert!(back.apply_text("graph_mode = sometimes").is_err());
}

#[test]
fn gradients_reach_adjacency_through_the_forecast() {
    let data = toy_data(SystemKind::Triangle, 3, 4, 3, 10);
    let cfg = small_config(Architecture::Resnet, &data, GraphMode::Learned);
    let model: FlowModel = build_model(&cfg, &data, None).unwrap();
    let obj = ForecastObjective { model };
    let refs: Vec<&Trajectory> = data.samples.iter().collect();
    let mut tape = Tape::new();
    let bound = obj.store().bind(&mut tape);
    let loss = obj.batch_loss(&mut tape, &bound, &refs, 0).unwrap();
    let g = grad(&tape, loss, &bound, obj.store()).unwrap();
    let a = obj.adjacency_param().unwrap();
    assert!(g[a.index()].frobenius() > 0.0);
}
