use super::{run_experiment_from, Experiment, ExperimentConfig, GraphMode, TrainConfig};
use crate::dynamics::TrajectoryBatch;
use crate::error::{Error, Result};
use crate::flows::Architecture;
use crate::graphs::{perturb_dag, GraphMetrics};

/// Graph and forecast quality after training from a perturbed truth.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub sigma: f64,
    pub seed: u64,
    pub metrics: GraphMetrics,
    pub test_mse: f64,
    pub final_h: f64,
}

/// Starts the learned adjacency at the data's graph plus `N(0, σ²)` noise,
/// trains, and scores the result.
pub fn perturbation_run(
    config: &ExperimentConfig,
    data: &TrajectoryBatch,
    sigma: f64,
    seed: u64,
) -> Result<(StudyRow, Experiment)> {
    if config.graph != GraphMode::Learned {
        return Err(Error::invalid("the perturbation study needs graph mode `learned`"));
    }
    let init = perturb_dag(&data.adjacency, sigma, seed)?;
    let run = run_experiment_from(config, data, Some(&init))?;
    let (_, metrics) = run.learned.clone().expect("learned mode reports a graph");
    let row = StudyRow {
        sigma,
        seed,
        metrics,
        test_mse: run.test_mse,
        final_h: run.report.final_h.unwrap_or(0.0),
    };
    Ok((row, run))
}

/// [`perturbation_run`] for each σ in turn.
pub fn perturbation_study(
    config: &ExperimentConfig,
    data: &TrajectoryBatch,
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<StudyRow>> {
    sigmas
        .iter()
        .map(|&sigma| perturbation_run(config, data, sigma, seed).map(|(row, _)| row))
        .collect()
}

pub fn study_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from("sigma,seed,tpr,fdr,fpr,shd,test_mse,h_A\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.sigma, r.seed, r.metrics.tpr, r.metrics.fdr, r.metrics.fpr, r.metrics.shd, r.test_mse, r.final_h
        ));
    }
    out
}

/// Per-epoch training time of one architecture with or without the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub arch: Architecture,
    pub graph: bool,
    pub epochs: usize,
    pub total_seconds: f64,
    pub seconds_per_epoch: f64,
    /// Fastest single epoch; less sensitive to scheduler noise than the mean.
    pub fastest_epoch_seconds: f64,
}

/// Trains each architecture for exactly `epochs` epochs with the learned
/// graph and without any graph, on the same split and minibatch order, and
/// reports the optimizer-pass wall-clock time.
pub fn timing_benchmark(
    base: &ExperimentConfig,
    data: &TrajectoryBatch,
    archs: &[Architecture],
    epochs: usize,
) -> Result<Vec<TimingRow>> {
    if epochs == 0 {
        return Err(Error::invalid("epochs must be positive"));
    }
    let mut rows = Vec::new();
    for &arch in archs {
        for graph in [true, false] {
            let mut config = base.clone();
            config.flow = crate::flows::FlowConfig {
                arch,
                blocks: crate::flows::FlowConfig::new(arch, data.n, data.d).blocks,
                enforce_contraction: arch != Architecture::Coupling,
                ..base.flow.clone()
            };
            config.graph = if graph { GraphMode::Learned } else { GraphMode::None };
            config.train = TrainConfig {
                epochs,
                patience: epochs,
                ..base.train.clone()
            };
            config.train.al.max_outer = 1;
            let run = run_experiment_from(&config, data, None)?;
            let total: f64 = run.report.history.iter().map(|r| r.seconds).sum();
            let fastest = run.report.history.iter().map(|r| r.seconds).fold(f64::INFINITY, f64::min);
            rows.push(TimingRow {
                arch,
                graph,
                epochs: run.report.history.len(),
                total_seconds: total,
                seconds_per_epoch: total / run.report.history.len() as f64,
                fastest_epoch_seconds: fastest,
            });
        }
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("arch,graph,epochs,total_seconds,seconds_per_epoch,fastest_epoch_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.arch, r.graph, r.epochs, r.total_seconds, r.seconds_per_epoch, r.fastest_epoch_seconds
        ));
    }
    out
}
