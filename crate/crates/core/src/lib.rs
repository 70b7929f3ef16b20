//! Graph-conditioned neural flows for interacting time series whose
//! dependency structure is a (learned) DAG.

pub mod error;
pub mod graphs;
pub mod rng;

pub use error::{Error, Result};
pub mod flows;
pub mod dynamics;
pub mod training;
pub mod latent;
