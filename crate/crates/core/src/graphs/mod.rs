//! DAG adjacency matrices, acyclicity functions, adjacency normalization,
//! random DAG generation, and structure-recovery metrics.

mod acyclicity;
pub(crate) mod dag;
mod generate;
mod metrics;
mod normalize;

pub use acyclicity::{acyclicity_expm, acyclicity_expm_var, acyclicity_poly, grad_acyclicity_expm};
pub use dag::{is_dag, DagMatrix};
pub use generate::{perturb_dag, random_dag};
pub use metrics::{graph_metrics, GraphMetrics, DEFAULT_EDGE_THRESHOLD};
pub use normalize::{normalize_adjacency, normalize_adjacency_var, NormalizedAdjacency};
