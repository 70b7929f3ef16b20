use gnflow_diffcore::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// `½ log 2π`, the per-entry NLL of a unit Gaussian at its mean.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian; `sigma = exp(log_sigma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl GaussianParams {
    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }

    /// One reparameterised draw `μ + σ ⊙ ε`.
    pub fn sample(&self, rng: &mut impl Rng) -> Tensor {
        let mut z = self.mu.clone();
        for (z, ls) in z.data_mut().iter_mut().zip(self.log_sigma.data()) {
            let e: f64 = rng.sample(StandardNormal);
            *z += ls.exp() * e;
        }
        z
    }
}

/// `KL(N(μ₁, σ₁²) ‖ N(μ₂, σ₂²))` for scalars.
pub fn gaussian_kl(mu1: f64, log_sigma1: f64, mu2: f64, log_sigma2: f64) -> f64 {
    let v1 = (2.0 * log_sigma1).exp();
    let v2 = (2.0 * log_sigma2).exp();
    log_sigma2 - log_sigma1 + (v1 + (mu1 - mu2).powi(2)) / (2.0 * v2) - 0.5
}

/// Entry-wise KL between diagonal Gaussians as a tape node (same shape as
/// the inputs).
pub fn kl_diag(tape: &mut Tape, mu1: Var, ls1: Var, mu2: Var, ls2: Var) -> Result<Var> {
    let dls = tape.sub(ls2, ls1)?;
    let two_dls = tape.scale(dls, 2.0);
    // σ₁²/σ₂² = exp(2 (ls₁ − ls₂))
    let neg = tape.neg(two_dls);
    let ratio = tape.exp(neg);
    let dmu = tape.sub(mu1, mu2)?;
    let dmu2 = tape.square(dmu)?;
    let ls2x2 = tape.scale(ls2, -2.0);
    let inv_v2 = tape.exp(ls2x2);
    let quad = tape.mul(dmu2, inv_v2)?;
    let sum = tape.add(ratio, quad)?;
    let half = tape.affine(sum, 0.5, -0.5);
    Ok(tape.add(dls, half)?)
}

/// Entry-wise `KL(N(μ, σ²) ‖ N(0, 1)) = ½(μ² + σ² − 1) − log σ`.
pub fn kl_standard(tape: &mut Tape, mu: Var, ls: Var) -> Result<Var> {
    let mu2 = tape.square(mu)?;
    let ls2 = tape.scale(ls, 2.0);
    let var = tape.exp(ls2);
    let s = tape.add(mu2, var)?;
    let half = tape.affine(s, 0.5, -0.5);
    Ok(tape.sub(half, ls)?)
}

/// Entry-wise Gaussian NLL `½((x − μ)/σ)² + log σ + ½ log 2π`.
pub fn gaussian_nll(tape: &mut Tape, x: Var, mu: Var, ls: Var) -> Result<Var> {
    let d = tape.sub(x, mu)?;
    let neg = tape.scale(ls, -1.0);
    let inv = tape.exp(neg);
    let z = tape.mul(d, inv)?;
    let z2 = tape.square(z)?;
    let half = tape.affine(z2, 0.5, HALF_LOG_2PI);
    Ok(tape.add(half, ls)?)
}
