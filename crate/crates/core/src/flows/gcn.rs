use gnflow_diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graphs::{normalize_adjacency, DagMatrix};
use crate::rng::Rng;

/// Bias-free two-layer graph convolution `Â relu(Â X W) U`, applied to every
/// n-row block of its input.
#[derive(Clone, Debug)]
pub struct GcnEncoder {
    pub w: ParamId,
    pub u: ParamId,
}

impl GcnEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let k1 = 1.0 / (d_in as f64).sqrt();
        let k2 = 1.0 / (hidden as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::from_fn(d_in, hidden, |_, _| rng.random_range(-k1..k1)),
        );
        let u = store.add(
            format!("{name}.u"),
            Tensor::from_fn(hidden, d_out, |_, _| rng.random_range(-k2..k2)),
        );
        Self { w, u }
    }

    /// Masked rows and columns of `Â` are skipped, so masked output rows are
    /// exactly zero and masked inputs never leak into other rows.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, ahat: Var, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ax = tape.block_matmul(ahat, x, mask)?;
        let axw = tape.matmul(ax, bound.var(self.w))?;
        let h = tape.relu(axw);
        let ah = tape.block_matmul(ahat, h, mask)?;
        Ok(tape.matmul(ah, bound.var(self.u))?)
    }
}

/// `Â relu(Â X W) U` for a single n×d input.
pub fn gcn_encode(a: &DagMatrix, x: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (rows, _) = x.expect_matrix("gcn_encode")?;
    if rows != a.n() {
        return Err(Error::invalid(format!("{} input rows for {} nodes", rows, a.n())));
    }
    let ahat = normalize_adjacency(a).hat;
    let h = ahat.matmul(&x.matmul(w)?)?.map(|v| v.max(0.0));
    Ok(ahat.matmul(&h.matmul(u)?)?)
}
