//! Training: masked losses, the augmented-Lagrangian loop for the acyclicity
//! constraint, forecasting experiments, and robustness and timing studies.

mod forecast;
mod history;
mod losses;
mod state;
mod studies;
mod trainer;

pub use forecast::{
    build_model, evaluate_forecast, initial_adjacency, run_experiment, run_experiment_from, Experiment,
    ExperimentConfig, ForecastObjective, GraphMode,
};
pub use history::{history_csv, EpochRecord, HISTORY_HEADER};
pub use losses::{augmented_loss, constraint_penalty, masked_sse, mse_loss};
pub use state::{AlConfig, TrainState};
pub use studies::{perturbation_run, perturbation_study, study_csv, timing_benchmark, timing_csv, StudyRow, TimingRow};
pub use trainer::{train, Objective, TrainConfig, TrainReport};

pub(crate) use losses::masked_target;


