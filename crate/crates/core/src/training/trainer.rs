use std::time::Instant;

use gnflow_diffcore::{grad, AdamConfig, Bound, DiffError, ParamId, ParamStore, Tape, Var};
use rand::seq::SliceRandom;

use super::{constraint_penalty, AlConfig, EpochRecord, TrainState};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::flows::parse;
use crate::graphs::{acyclicity_expm, DagMatrix};
use crate::rng::{stream, streams};

/// A trainable model seen by the augmented-Lagrangian loop.
pub trait Objective {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// The adjacency parameter under the acyclicity constraint, if any.
    fn adjacency_param(&self) -> Option<ParamId>;
    /// Mean task loss over a minibatch. `noise_seed` drives any sampling the
    /// loss needs.
    fn batch_loss(&self, tape: &mut Tape, bound: &Bound, batch: &[&Trajectory], noise_seed: u64) -> Result<Var>;
    /// Task loss over a held-out set; deterministic.
    fn validation_loss(&self, samples: &[&Trajectory]) -> Result<f64>;
    /// Projection applied after every optimizer step.
    fn post_step(&mut self) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epoch cap per inner solve.
    pub epochs: usize,
    /// Epochs without validation improvement before an inner solve stops.
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning-rate multiplier for the adjacency.
    pub adjacency_lr_scale: f64,
    pub al: AlConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 10,
            batch_size: 16,
            adam: AdamConfig::default(),
            adjacency_lr_scale: 1.0,
            al: AlConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs, patience, and batch_size must be positive"));
        }
        if !(self.adam.lr > 0.0) || !(self.adjacency_lr_scale > 0.0) {
            return Err(Error::invalid("learning rate and its adjacency scale must be positive"));
        }
        self.al.validate()
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("adjacency_lr_scale", self.adjacency_lr_scale.to_string()),
            ("eta", self.al.eta.to_string()),
            ("gamma_al", self.al.gamma_al.to_string()),
            ("dag_threshold", self.al.dag_threshold.to_string()),
            ("initial_penalty", self.al.initial_penalty.to_string()),
            ("max_outer", self.al.max_outer.to_string()),
            ("train_seed", self.seed.to_string()),
        ]
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "adjacency_lr_scale" => self.adjacency_lr_scale = parse(key, value)?,
            "eta" => self.al.eta = parse(key, value)?,
            "gamma_al" => self.al.gamma_al = parse(key, value)?,
            "dag_threshold" => self.al.dag_threshold = parse(key, value)?,
            "initial_penalty" => self.al.initial_penalty = parse(key, value)?,
            "max_outer" => self.al.max_outer = parse(key, value)?,
            "train_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub outer_iterations: usize,
    /// Constraint value at the end; `None` without a learned graph.
    pub final_h: Option<f64>,
    /// Best validation task loss of the last inner solve.
    pub best_val: f64,
    /// Multiplier state at the end; `None` without a learned graph.
    pub state: Option<TrainState>,
    /// `|h|` dropped below the threshold (always true without a learned graph).
    pub converged: bool,
}

impl TrainReport {
    /// Mean wall-clock seconds of the optimizer passes.
    pub fn seconds_per_epoch(&self) -> f64 {
        if self.history.is_empty() {
            return 0.0;
        }
        self.history.iter().map(|r| r.seconds).sum::<f64>() / self.history.len() as f64
    }
}

fn current_h(store: &ParamStore, id: ParamId) -> Result<f64> {
    Ok(acyclicity_expm(&DagMatrix::with_zeroed_diagonal(store.get(id).clone())?))
}

fn diverged(message: impl Into<String>, history: &[EpochRecord]) -> Error {
    Error::Diverged {
        message: message.into(),
        history: history.to_vec(),
    }
}

fn noise_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step
}

/// Minimises the task loss subject to `h(A) = 0` by the augmented
/// Lagrangian: an Adam inner solve with early stopping on the validation
/// objective, then the multiplier and penalty updates. Without a trainable
/// adjacency a single inner solve is run.
///
/// Each inner solve ends by restoring the best parameters (and optimizer
/// state) seen on the validation objective.
pub fn train<O: Objective>(
    obj: &mut O,
    train: &[&Trajectory],
    val: &[&Trajectory],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let adjacency = obj
        .adjacency_param()
        .filter(|&id| obj.store().is_trainable(id));
    if let Some(id) = adjacency {
        obj.store_mut().set_lr_scale(id, cfg.adjacency_lr_scale);
    }
    let mut state = TrainState::new(cfg.al);
    let mut shuffle = stream(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut step: u64 = 0;
    let mut best_val = f64::INFINITY;
    let outer_cap = if adjacency.is_some() { cfg.al.max_outer } else { 1 };
    let mut converged = adjacency.is_none();

    for outer in 0..outer_cap {
        let mut best: Option<(f64, f64, ParamStore)> = None;
        let mut stale = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle);
            let started = Instant::now();
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Trajectory> = chunk.iter().map(|&i| train[i]).collect();
                let mut tape = Tape::new();
                let bound = obj.store().bind(&mut tape);
                let task = obj.batch_loss(&mut tape, &bound, &batch, noise_seed(cfg.seed, step))?;
                let loss = match adjacency {
                    Some(id) => {
                        let (penalty, _) = match constraint_penalty(&mut tape, bound.var(id), &state) {
                            Ok(p) => p,
                            Err(Error::Numerical(m)) => return Err(diverged(m, &history)),
                            Err(e) => return Err(e),
                        };
                        tape.add(task, penalty)?
                    }
                    None => task,
                };
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(diverged(format!("non-finite loss at outer {outer}, epoch {epoch}"), &history));
                }
                total += tape.value(task).item() * batch.len() as f64;
                let grads = grad(&tape, loss, &bound, obj.store())?;
                match obj.store_mut().adam_step(&grads, &cfg.adam) {
                    Ok(()) => {}
                    Err(DiffError::NonFiniteGradient(name)) => {
                        return Err(diverged(format!("non-finite gradient for `{name}`"), &history));
                    }
                    Err(e) => return Err(e.into()),
                }
                obj.post_step()?;
                step += 1;
            }
            let seconds = started.elapsed().as_secs_f64();
            let val_loss = obj.validation_loss(val)?;
            let h = adjacency.map(|id| current_h(obj.store(), id)).transpose()?;
            let objective = val_loss + h.map_or(0.0, |h| state.penalty_value(h));
            if !objective.is_finite() {
                return Err(diverged(format!("non-finite validation objective at outer {outer}, epoch {epoch}"), &history));
            }
            history.push(EpochRecord {
                outer,
                epoch,
                train_loss: total / train.len() as f64,
                val_loss,
                val_objective: objective,
                h: h.unwrap_or(0.0),
                lambda: state.lambda,
                penalty: state.penalty,
                seconds,
            });
            log::debug!("outer {outer} epoch {epoch}: val {val_loss:.6} objective {objective:.6}");
            if best.as_ref().is_none_or(|(b, _, _)| objective < *b) {
                best = Some((objective, val_loss, obj.store().clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        if let Some((_, val_loss, snapshot)) = best {
            *obj.store_mut() = snapshot;
            best_val = val_loss;
        }
        let Some(id) = adjacency else { break };
        let h = current_h(obj.store(), id)?;
        if state.finish_outer(h) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "acyclicity constraint not met after {} outer iterations (h = {:e})",
            state.outer,
            state.h_prev.unwrap_or(f64::NAN)
        );
    }
    let final_h = adjacency.map(|id| current_h(obj.store(), id)).transpose()?;
    Ok(TrainReport {
        history,
        outer_iterations: state.outer.max(1),
        final_h,
        best_val,
        state: adjacency.map(|_| state),
        converged,
    })
}
