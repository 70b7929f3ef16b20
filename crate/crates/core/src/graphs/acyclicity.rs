use gnflow_diffcore::{matrix_exponential, CustomOp, Tape, Tensor, Var};

use super::DagMatrix;
use crate::error::{Error, Result};

fn squared(a: &Tensor) -> Tensor {
    a.map(|x| x * x)
}

/// All-NaN when `A ∘ A` has non-finite entries, e.g. after overflow.
fn expm_of_square(a: &Tensor) -> Tensor {
    let sq = squared(a);
    if !sq.all_finite() {
        return sq.map(|_| f64::NAN);
    }
    matrix_exponential(&sq).expect("square and finite")
}

/// `h(A) = tr(expm(A ∘ A)) − n`, zero exactly on DAGs. NaN when `A ∘ A`
/// overflows.
pub fn acyclicity_expm(a: &DagMatrix) -> f64 {
    let e = expm_of_square(a.weights());
    e.trace().expect("square") - a.n() as f64
}

/// `tr((I + α A ∘ A)ⁿ) − n`.
pub fn acyclicity_poly(a: &DagMatrix, alpha: f64) -> Result<f64> {
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be finite and nonzero, got {alpha}")));
    }
    let n = a.n();
    let m = Tensor::eye(n).add(&squared(a.weights()).scale(alpha))?;
    let mut p = Tensor::eye(n);
    for _ in 0..n {
        p = p.matmul(&m)?;
    }
    Ok(p.trace()? - n as f64)
}

/// `∇h(A) = expm(A ∘ A)ᵀ ∘ 2A`.
pub fn grad_acyclicity_expm(a: &DagMatrix) -> Tensor {
    closed_form_grad(&expm_of_square(a.weights()), a.weights())
}

fn closed_form_grad(e: &Tensor, a: &Tensor) -> Tensor {
    let n = a.rows();
    Tensor::from_fn(n, n, |i, j| e.get(j, i) * 2.0 * a.get(i, j))
}

struct Acyclicity {
    expm: Tensor,
}

impl CustomOp for Acyclicity {
    fn name(&self) -> &'static str {
        "acyclicity_expm"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![closed_form_grad(&self.expm, inputs[0]).scale(grad.item())]
    }
}

/// `h(A)` as a scalar tape node whose gradient is the closed form above.
pub fn acyclicity_expm_var(tape: &mut Tape, a: Var) -> Result<Var> {
    let value = tape.value(a);
    let n = value.expect_square("acyclicity_expm")?;
    if !squared(value).all_finite() {
        return Err(Error::Numerical("adjacency has non-finite or overflowing entries".into()));
    }
    let expm = expm_of_square(value);
    let h = expm.trace()? - n as f64;
    Ok(tape.custom(&[a], Tensor::scalar(h), Box::new(Acyclicity { expm })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cycle() -> DagMatrix {
        DagMatrix::from_edges(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap()
    }

    fn demo_graph() -> DagMatrix {
        DagMatrix::from_edges(3, &[(0, 1, 0.5), (1, 2, 0.7)]).unwrap()
    }

    #[test]
    fn expm_examples() {
        assert_eq!(acyclicity_expm(&DagMatrix::zeros(3)), 0.0);
        assert!(acyclicity_expm(&demo_graph()).abs() <= 1e-12);
        let expected = 2.0 * 1f64.cosh() - 2.0;
        assert!((acyclicity_expm(&two_cycle()) - expected).abs() < 1e-12);
        assert!((acyclicity_expm(&two_cycle()) - 1.0861612).abs() < 1e-7);
    }

    #[test]
    fn poly_examples() {
        assert_eq!(acyclicity_poly(&DagMatrix::zeros(3), 0.3).unwrap(), 0.0);
        assert!((acyclicity_poly(&two_cycle(), 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(acyclicity_poly(&demo_graph(), 1.0).unwrap(), 0.0);
        assert!(acyclicity_poly(&demo_graph(), 0.0).is_err());
    }

    #[test]
    fn gradient_of_empty_graph_is_zero() {
        assert_eq!(grad_acyclicity_expm(&DagMatrix::zeros(3)), Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn two_cycle_gradient_is_two_sinh_one() {
        // expm of the swap matrix has off-diagonal sinh(1), so ∂h/∂a₁₂ = 2·sinh(1).
        let g = grad_acyclicity_expm(&two_cycle());
        let fd = {
            let h = 1e-6;
            let mut plus = two_cycle().into_tensor();
            plus.set(0, 1, 1.0 + h);
            let mut minus = two_cycle().into_tensor();
            minus.set(0, 1, 1.0 - h);
            (acyclicity_expm(&DagMatrix::new(plus).unwrap()) - acyclicity_expm(&DagMatrix::new(minus).unwrap()))
                / (2.0 * h)
        };
        assert!((g.get(0, 1) - 2.0 * 1f64.sinh()).abs() < 1e-12);
        assert!((g.get(0, 1) - fd).abs() / fd < 1e-5);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn tape_op_matches_plain_value_and_gradient() {
        let a = demo_graph();
        let mut tape = Tape::new();
        let v = tape.variable(a.weights().clone());
        let h = acyclicity_expm_var(&mut tape, v).unwrap();
        assert_eq!(tape.value(h).item(), acyclicity_expm(&a));
        let g = tape.backward(h).unwrap();
        assert_eq!(g.get(v).unwrap(), &grad_acyclicity_expm(&a));
    }

    #[test]
    fn overflow_gives_nan_not_a_panic() {
        let a = DagMatrix::new(Tensor::from_rows(&[[0.0, 1e200], [0.0, 0.0]])).unwrap();
        assert!(acyclicity_expm(&a).is_nan());
        let mut tape = Tape::new();
        let v = tape.variable(a.weights().clone());
        assert!(acyclicity_expm_var(&mut tape, v).is_err());
    }
}
