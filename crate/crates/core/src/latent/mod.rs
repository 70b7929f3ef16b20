//! Latent-variable heads: a variational smoother whose encoder runs a pair
//! of LSTMs, and a filter built on a pair of GRUs. In both, one recurrent
//! stream reads graph-convolved observations and a non-graph ResNet flow
//! carries the hidden states between observation times.

mod cells;
mod gaussian;
mod model;

pub use cells::{GruCell, LstmCell};
pub use gaussian::{gaussian_kl, gaussian_nll, kl_diag, kl_standard, GaussianParams, HALF_LOG_2PI};
pub use model::{EncoderDirection, HiddenPair, LatentApproach, LatentConfig, LatentModel};
