use gnflow_diffcore::{CustomOp, Tape, Tensor, Var};

use super::DagMatrix;
use crate::error::Result;

/// `Â = I − Aᵀ/γ` with `γ = maxⱼ Σ_{i≠j} |Bᵢⱼ|`, `B = A + Aᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub hat: Tensor,
    pub gamma: f64,
}

/// Returns `(γ, argmax column)`; the column is `None` when γ = 0.
fn gamma_of(a: &Tensor) -> (f64, Option<usize>) {
    let n = a.rows();
    let mut best = 0.0;
    let mut arg = None;
    for j in 0..n {
        let s: f64 = (0..n)
            .filter(|&i| i != j)
            .map(|i| (a.get(i, j) + a.get(j, i)).abs())
            .sum();
        if s > best {
            best = s;
            arg = Some(j);
        }
    }
    (best, arg)
}

fn hat_of(a: &Tensor, gamma: f64) -> Tensor {
    let n = a.rows();
    if gamma == 0.0 {
        return Tensor::eye(n);
    }
    Tensor::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - a.get(j, i) / gamma
    })
}

pub fn normalize_adjacency(a: &DagMatrix) -> NormalizedAdjacency {
    let (gamma, _) = gamma_of(a.weights());
    NormalizedAdjacency {
        hat: hat_of(a.weights(), gamma),
        gamma,
    }
}

struct Normalize {
    gamma: f64,
    arg: Option<usize>,
}

impl CustomOp for Normalize {
    fn name(&self) -> &'static str {
        "normalize_adjacency"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let a = inputs[0];
        let n = a.rows();
        let Some(js) = self.arg else {
            return vec![Tensor::zeros(&[n, n])];
        };
        let g = self.gamma;
        // Direct path: Â_ij = δ_ij − A_ji/γ.
        let mut da = Tensor::from_fn(n, n, |i, j| -grad.get(j, i) / g);
        // Through γ: ∂L/∂γ = Σ G_ij A_ji / γ², and γ depends on column/row j*.
        let mut dgamma = 0.0;
        for i in 0..n {
            for j in 0..n {
                dgamma += grad.get(i, j) * a.get(j, i);
            }
        }
        dgamma /= g * g;
        for i in (0..n).filter(|&i| i != js) {
            let b = a.get(i, js) + a.get(js, i);
            let s = if b > 0.0 {
                1.0
            } else if b < 0.0 {
                -1.0
            } else {
                0.0
            };
            da.set(i, js, da.get(i, js) + dgamma * s);
            da.set(js, i, da.get(js, i) + dgamma * s);
        }
        vec![da]
    }
}

/// Differentiable `Â` of an adjacency variable. γ is treated as a function of
/// `A` through its maximizing column.
pub fn normalize_adjacency_var(tape: &mut Tape, a: Var) -> Result<Var> {
    let value = tape.value(a);
    value.expect_square("normalize_adjacency")?;
    let (gamma, arg) = gamma_of(value);
    let hat = hat_of(value, gamma);
    Ok(tape.custom(&[a], hat, Box::new(Normalize { gamma, arg })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_graph_gives_identity() {
        let na = normalize_adjacency(&DagMatrix::zeros(4));
        assert_eq!(na.gamma, 0.0);
        assert_eq!(na.hat, Tensor::eye(4));
    }

    #[test]
    fn demo_graph_values() {
        let a = DagMatrix::from_edges(3, &[(0, 1, 0.5), (1, 2, 0.7)]).unwrap();
        let na = normalize_adjacency(&a);
        assert!((na.gamma - 1.2).abs() < 1e-15);
        let expected = Tensor::from_rows(&[[1.0, 0.0, 0.0], [-0.41667, 1.0, 0.0], [0.0, -0.58333, 1.0]]);
        assert!(na.hat.max_abs_diff(&expected) < 5e-6);
    }

    #[test]
    fn tape_value_matches_plain() {
        let a = DagMatrix::from_edges(3, &[(0, 1, 0.5), (1, 2, 0.7)]).unwrap();
        let mut tape = Tape::new();
        let v = tape.variable(a.weights().clone());
        let hat = normalize_adjacency_var(&mut tape, v).unwrap();
        assert_eq!(tape.value(hat), &normalize_adjacency(&a).hat);
    }
}
