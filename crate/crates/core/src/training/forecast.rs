use std::fmt;
use std::str::FromStr;

use gnflow_diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::{masked_sse, mse_loss, train, Objective, TrainConfig, TrainReport};
use crate::dynamics::{split_indices, Split, Trajectory, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::flows::{parse, Architecture, FlowConfig, FlowModel};
use crate::graphs::{graph_metrics, DagMatrix, GraphMetrics, DEFAULT_EDGE_THRESHOLD};
use crate::rng::{stream, streams};

/// Samples per forward pass when evaluating.
const EVAL_CHUNK: usize = 16;

/// Stacked initial conditions, time lists, targets, and masks of a batch.
struct Stacked<'a> {
    x0: Tensor,
    times: Vec<&'a [f64]>,
    target: Tensor,
    mask: Vec<bool>,
}

fn stack<'a>(batch: &[&'a Trajectory]) -> Result<Stacked<'a>> {
    let inits: Vec<&Tensor> = batch.iter().map(|t| &t.initial).collect();
    let values: Vec<&Tensor> = batch.iter().map(|t| &t.values).collect();
    Ok(Stacked {
        x0: Tensor::vstack(&inits)?,
        times: batch.iter().map(|t| t.times.as_slice()).collect(),
        target: Tensor::vstack(&values)?,
        mask: batch.iter().flat_map(|t| t.mask.iter().copied()).collect(),
    })
}

/// Forecasting from the initial condition: `X̂(t_j) = F(t_j, X₀, A)` scored
/// by masked MSE.
#[derive(Clone, Debug)]
pub struct ForecastObjective {
    pub model: FlowModel,
}

impl Objective for ForecastObjective {
    fn store(&self) -> &ParamStore {
        self.model.store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.model.store_mut()
    }

    fn adjacency_param(&self) -> Option<ParamId> {
        self.model.adjacency_param()
    }

    fn batch_loss(&self, tape: &mut Tape, bound: &Bound, batch: &[&Trajectory], _noise_seed: u64) -> Result<Var> {
        let s = stack(batch)?;
        let x0 = tape.constant(s.x0);
        let pred = self.model.predict(tape, bound, x0, &s.times)?;
        mse_loss(tape, pred, &s.target, &s.mask)
    }

    fn validation_loss(&self, samples: &[&Trajectory]) -> Result<f64> {
        evaluate_forecast(&self.model, samples)
    }

    fn post_step(&mut self) -> Result<()> {
        self.model.post_step()
    }
}

/// Masked MSE of forecasts from each sample's initial condition.
pub fn evaluate_forecast(model: &FlowModel, samples: &[&Trajectory]) -> Result<f64> {
    let mut sse = 0.0;
    let mut count = 0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let s = stack(chunk)?;
        let mut tape = Tape::new();
        let bound = model.store().bind(&mut tape);
        let x0 = tape.constant(s.x0);
        let pred = model.predict(&mut tape, &bound, x0, &s.times)?;
        let (e, c) = masked_sse(tape.value(pred), &s.target, &s.mask)?;
        sse += e;
        count += c;
    }
    if count == 0 {
        return Err(Error::invalid("no observed entries to evaluate"));
    }
    Ok(sse / count as f64)
}

/// Where the graph conditioning the flow comes from.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GraphMode {
    /// Learned jointly under the acyclicity constraint.
    Learned,
    /// Fixed to the data's generating graph.
    GroundTruth,
    /// No graph branch at all.
    None,
}

impl GraphMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphMode::Learned => "learned",
            GraphMode::GroundTruth => "truth",
            GraphMode::None => "none",
        }
    }
}

impl fmt::Display for GraphMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(GraphMode::Learned),
            "truth" => Ok(GraphMode::GroundTruth),
            "none" => Ok(GraphMode::None),
            _ => Err(Error::invalid(format!("unknown graph mode `{s}` (expected learned, truth, or none)"))),
        }
    }
}

/// Everything needed to reproduce one training run on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub flow: FlowConfig,
    pub graph: GraphMode,
    pub train: TrainConfig,
    /// Train, validation, and test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub model_seed: u64,
    /// Off-diagonal adjacency entries start uniform in `[0, adjacency_init)`.
    pub adjacency_init: f64,
    pub edge_threshold: f64,
}

impl ExperimentConfig {
    pub fn new(arch: Architecture, nodes: usize, features: usize) -> Self {
        let mut train = TrainConfig::default();
        train.al = super::AlConfig::for_nodes(nodes);
        Self {
            flow: FlowConfig::new(arch, nodes, features),
            graph: GraphMode::Learned,
            train,
            split: [0.6, 0.2, 0.2],
            split_seed: 0,
            model_seed: 0,
            adjacency_init: 0.1,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
        }
    }

    /// Configuration sized for `data`.
    pub fn for_data(arch: Architecture, data: &TrajectoryBatch) -> Self {
        Self::new(arch, data.n, data.d)
    }

    /// Uses one seed for the split, the initialisation, and the shuffles.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.split_seed = seed;
        self.model_seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.train.validate()?;
        if !(self.adjacency_init > 0.0 && self.adjacency_init.is_finite()) {
            return Err(Error::invalid("adjacency_init must be positive"));
        }
        if !(self.edge_threshold >= 0.0) {
            return Err(Error::invalid("edge_threshold must be non-negative"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = self.flow.to_pairs();
        pairs.push(("graph_mode", self.graph.to_string()));
        pairs.extend(self.train.to_pairs());
        pairs.push((
            "split",
            format!("{},{},{}", self.split[0], self.split[1], self.split[2]),
        ));
        pairs.push(("split_seed", self.split_seed.to_string()));
        pairs.push(("model_seed", self.model_seed.to_string()));
        pairs.push(("adjacency_init", self.adjacency_init.to_string()));
        pairs.push(("edge_threshold", self.edge_threshold.to_string()));
        pairs
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.flow.set(key, value)? || self.train.set(key, value)? {
            return Ok(true);
        }
        match key {
            "graph_mode" => self.graph = value.trim().parse()?,
            "split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse(key, p))
                    .collect::<Result<_>>()?;
                self.split = parts
                    .try_into()
                    .map_err(|_| Error::invalid("split needs three comma-separated fractions"))?;
            }
            "split_seed" => self.split_seed = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "adjacency_init" => self.adjacency_init = parse(key, value)?,
            "edge_threshold" => self.edge_threshold = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines, one per setting.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(lineno + 1, format!("expected `key = value`, got `{line}`")))?;
            if !self.set(k.trim(), v.trim())? {
                return Err(Error::format(lineno + 1, format!("unknown setting `{}`", k.trim())));
            }
        }
        Ok(())
    }

    /// Flow configuration with the graph branch matching the graph mode.
    pub fn model_config(&self) -> FlowConfig {
        FlowConfig {
            graph: self.graph != GraphMode::None,
            ..self.flow.clone()
        }
    }
}

/// Small random off-diagonal start for a learned adjacency. An all-zero start
/// would leave `Â = I` with no gradient.
pub fn initial_adjacency(n: usize, scale: f64, seed: u64) -> Result<DagMatrix> {
    let mut rng = stream(seed, streams::ADJ_INIT);
    let w = Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.random_range(0.0..scale) });
    DagMatrix::new(w)
}

/// A trained model with its split and scores.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: FlowModel,
    pub split: Split,
    pub report: TrainReport,
    pub test_mse: f64,
    /// Learned graph and its metrics against the data's graph.
    pub learned: Option<(DagMatrix, GraphMetrics)>,
}

fn refs<'a>(data: &'a TrajectoryBatch, idx: &[usize]) -> Vec<&'a Trajectory> {
    idx.iter().map(|&i| &data.samples[i]).collect()
}

/// Builds the untrained model for `config` on `data`: adjacency set from the
/// graph mode (or from `init` when learning).
pub fn build_model(config: &ExperimentConfig, data: &TrajectoryBatch, init: Option<&DagMatrix>) -> Result<FlowModel> {
    config.validate()?;
    if config.flow.nodes != data.n || config.flow.features != data.d {
        return Err(Error::invalid(format!(
            "model expects {} nodes × {} features, data has {} × {}",
            config.flow.nodes, config.flow.features, data.n, data.d
        )));
    }
    let mut model = FlowModel::new(config.model_config(), config.model_seed)?;
    match config.graph {
        GraphMode::Learned => {
            let a = match init {
                Some(a) => a.clone(),
                None => initial_adjacency(data.n, config.adjacency_init, config.model_seed)?,
            };
            model.set_adjacency(&a)?;
        }
        GraphMode::GroundTruth => {
            model.set_adjacency(&data.adjacency)?;
            let id = model.adjacency_param().expect("graph branch present");
            model.store_mut().set_trainable(id, false);
        }
        GraphMode::None => {}
    }
    Ok(model)
}

/// Trains on the split given by `config` and scores on its test part.
pub fn run_experiment(config: &ExperimentConfig, data: &TrajectoryBatch) -> Result<Experiment> {
    run_experiment_from(config, data, None)
}

/// Like [`run_experiment`] with an explicit adjacency initialisation.
pub fn run_experiment_from(
    config: &ExperimentConfig,
    data: &TrajectoryBatch,
    init: Option<&DagMatrix>,
) -> Result<Experiment> {
    data.validate()?;
    let model = build_model(config, data, init)?;
    let split = split_indices(data.len(), config.split, config.split_seed)?;
    let mut obj = ForecastObjective { model };
    let report = train(&mut obj, &refs(data, &split.train), &refs(data, &split.val), &config.train)?;
    let test_mse = evaluate_forecast(&obj.model, &refs(data, &split.test))?;
    let learned = match config.graph {
        GraphMode::Learned => {
            let a = obj.model.adjacency().expect("graph branch present");
            let m = graph_metrics(&a, &data.adjacency, config.edge_threshold)?;
            Some((a, m))
        }
        _ => None,
    };
    Ok(Experiment {
        config: config.clone(),
        model: obj.model,
        split,
        report,
        test_mse,
        learned,
    })
}
