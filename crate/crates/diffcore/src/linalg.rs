//! Matrix exponential and spectral-norm control.

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

const TAYLOR_TERMS: usize = 18;

/// Relative slack before `clip_spectral` rescales; keeps clipping idempotent
/// when the re-measured norm lands an ulp above the bound.
const CLIP_SLACK: f64 = 1e-10;

fn norm_one(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    (0..c)
        .map(|j| (0..r).map(|i| m.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `expm(M)` by scaling and squaring: scale by `2^k` until `‖M/2^k‖₁ ≤ 1/2`,
/// sum an 18-term Taylor series, then square `k` times.
pub fn matrix_exponential(m: &Tensor) -> Result<Tensor> {
    let n = m.expect_square("matrix_exponential")?;
    if !m.all_finite() {
        return Err(DiffError::InvalidArgument(
            "matrix_exponential: non-finite entries".into(),
        ));
    }
    let norm = norm_one(m);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil().max(0.0) as u32;
    }
    let scaled = m.scale(0.5f64.powi(squarings as i32));

    let mut result = Tensor::eye(n);
    let mut term = Tensor::eye(n);
    for k in 1..=TAYLOR_TERMS {
        term = term.matmul(&scaled)?.scale(1.0 / k as f64);
        result.add_assign(&term)?;
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

fn start_vector(n: usize) -> Vec<f64> {
    // Deterministic, strictly positive, and not aligned with coordinate axes.
    let v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Tensor, iters: usize) -> Result<f64> {
    let (r, c) = m.expect_matrix("spectral_norm")?;
    if r == 0 || c == 0 || m.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let data = m.data();
    let mut v = start_vector(c);
    let mut mv = vec![0.0; r];
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        for i in 0..r {
            mv[i] = data[i * c..(i + 1) * c].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut w = vec![0.0; c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            for (w, a) in w.iter_mut().zip(row) {
                *w += a * mv[i];
            }
        }
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return Ok(0.0);
        }
        // ‖MᵀMv‖ → σ² as v aligns with the top right-singular vector.
        let next = wn.sqrt();
        v = w.into_iter().map(|x| x / wn).collect();
        let converged = (next - sigma).abs() <= 1e-15 * next;
        sigma = next;
        if converged {
            break;
        }
    }
    // Read out ‖Mv‖ for the converged unit direction.
    for i in 0..r {
        mv[i] = data[i * c..(i + 1) * c].iter().zip(&v).map(|(a, b)| a * b).sum();
    }
    Ok(mv.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Rescales `M` so its spectral norm does not exceed `bound`.
pub fn clip_spectral(m: &Tensor, bound: f64, iters: usize) -> Result<Tensor> {
    if !(bound > 0.0) {
        return Err(DiffError::InvalidArgument(format!(
            "clip_spectral: bound must be positive, got {bound}"
        )));
    }
    let s = spectral_norm(m, iters)?;
    if s > bound * (1.0 + CLIP_SLACK) {
        Ok(m.scale(bound / s))
    } else {
        Ok(m.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_zero_is_identity() {
        let e = matrix_exponential(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(e, Tensor::eye(3));
    }

    #[test]
    fn expm_of_diagonal() {
        let e = matrix_exponential(&Tensor::diag(&[1.0])).unwrap();
        assert!((e.item() - std::f64::consts::E).abs() < 1e-14);
    }

    #[test]
    fn expm_rejects_non_square() {
        assert!(matches!(
            matrix_exponential(&Tensor::zeros(&[2, 3])),
            Err(DiffError::NotSquare { .. })
        ));
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert!((spectral_norm(&Tensor::eye(4), 100).unwrap() - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&Tensor::diag(&[3.0, 1.0]), 100).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Tensor::zeros(&[3, 2]), 100).unwrap(), 0.0);
    }

    #[test]
    fn clip_spectral_cases() {
        let m = Tensor::diag(&[0.5, 0.2]);
        assert_eq!(clip_spectral(&m, 0.9, 100).unwrap(), m);
        let two_i = Tensor::diag(&[2.0, 2.0]);
        let clipped = clip_spectral(&two_i, 1.0, 100).unwrap();
        assert!(clipped.max_abs_diff(&Tensor::eye(2)) < 1e-15);
        assert!(clip_spectral(&m, 0.0, 100).is_err());
        assert!(clip_spectral(&m, -1.0, 100).is_err());
    }
}
