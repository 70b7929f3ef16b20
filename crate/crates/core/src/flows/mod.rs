//! Graph-conditioned flows `F(t, X, A)` with `F(0, X, A) = X`, invertible in
//! `X`: a ResNet-style flow, a GRU-style flow, and an affine coupling flow,
//! all sharing a bias-free GCN encoder.

mod blocks;
mod checkpoint;
mod gcn;
mod layers;
mod model;

pub use blocks::{CouplingBlock, GruBlock, GruUnit, ResnetBlock};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use gcn::{gcn_encode, GcnEncoder};
pub use layers::{Linear, Mlp};
pub use model::{Architecture, FlowConfig, FlowModel};
pub(crate) use model::{parse, time_inputs, CLIP_ITERS};
pub(crate) use layers::widths;
pub(crate) use blocks::{Ctx, Widths};
