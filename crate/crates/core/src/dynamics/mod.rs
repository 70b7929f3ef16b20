//! Ground-truth interacting systems on a DAG, a fixed-step Runge–Kutta
//! integrator, and irregularly sampled trajectory datasets.

mod dataset;
mod io;
mod rk4;
mod systems;

pub use dataset::{apply_missingness, sample_dataset, split_indices, Split, Trajectory, TrajectoryBatch, MAX_TIME};
pub use io::{read_dataset, write_dataset, DATA_VERSION};
pub use rk4::{rk4_solve, RK4_MAX_STEP};
pub use systems::{
    demo_initial_condition, demo_system, sawtooth_solution, sink_rhs, square_solution, triangle_solution, triangle_wave,
    SystemKind, SystemSpec, SINK_DYNAMICS,
};
