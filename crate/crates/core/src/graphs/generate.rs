use gnflow_diffcore::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Open01};

use super::DagMatrix;
use crate::error::{Error, Result};
use crate::rng::{stream, streams};

/// Sparse random DAG: Bernoulli(`density`) pattern with values uniform in
/// (0, 1), restricted to the strict upper triangle, then relabelled by a
/// random symmetric permutation.
pub fn random_dag(n: usize, density: f64, seed: u64) -> Result<DagMatrix> {
    if n == 0 {
        return Err(Error::invalid("a DAG needs at least one node"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density must lie in (0, 1], got {density}")));
    }
    let mut rng = stream(seed, streams::DAG);
    let mut upper = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(density) {
                let v: f64 = Open01.sample(&mut rng);
                upper.set(i, j, v);
            }
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    DagMatrix::new(upper)?.permuted(&perm)
}

/// Adds independent `N(0, σ²)` noise to every off-diagonal entry.
pub fn perturb_dag(truth: &DagMatrix, sigma: f64, seed: u64) -> Result<DagMatrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(truth.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = stream(seed, streams::PERTURB);
    let n = truth.n();
    let mut w = truth.weights().clone();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w.set(i, j, w.get(i, j) + normal.sample(&mut rng));
            }
        }
    }
    DagMatrix::new(w)
}
