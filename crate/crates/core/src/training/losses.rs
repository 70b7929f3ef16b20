use gnflow_diffcore::{Tape, Tensor, Var};

use super::TrainState;
use crate::error::{Error, Result};
use crate::graphs::acyclicity_expm_var;

/// Target with hidden rows zeroed plus the matching 0/1 row weights, so that
/// hidden (possibly NaN) values never reach arithmetic.
pub(crate) fn masked_target(values: &Tensor, mask: &[bool]) -> Result<(Tensor, Tensor, usize)> {
    let (rows, cols) = values.expect_matrix("mse_loss")?;
    if mask.len() != rows {
        return Err(Error::invalid(format!("mask of length {} for {rows} rows", mask.len())));
    }
    let mut clean = values.clone();
    let mut weights = Vec::with_capacity(rows);
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            for c in 0..cols {
                clean.set(r, c, 0.0);
            }
        }
        weights.push(if m { 1.0 } else { 0.0 });
    }
    let count = mask.iter().filter(|m| **m).count() * cols;
    if count == 0 {
        return Err(Error::invalid("mask hides every entry"));
    }
    Ok((clean, Tensor::matrix(rows, 1, weights)?, count))
}

/// Mean squared error over rows whose mask is set. Hidden rows contribute
/// neither loss nor gradient.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    tape.value(pred).expect_same_shape(target, "mse_loss")?;
    let (clean, weights, count) = masked_target(target, mask)?;
    let t = tape.constant(clean);
    let w = tape.constant(weights);
    let diff = tape.sub(pred, t)?;
    let kept = tape.mul_col(diff, w)?;
    let sq = tape.square(kept)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Sum of squared errors and the number of observed entries.
pub fn masked_sse(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<(f64, usize)> {
    pred.expect_same_shape(target, "masked_sse")?;
    let cols = pred.cols();
    if mask.len() != pred.rows() {
        return Err(Error::invalid(format!("mask of length {} for {} rows", mask.len(), pred.rows())));
    }
    let mut sse = 0.0;
    let mut count = 0;
    for (r, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..cols {
                let e = pred.get(r, c) - target.get(r, c);
                sse += e * e;
            }
            count += cols;
        }
    }
    Ok((sse, count))
}

/// `λ h(A) + (c/2) h(A)²` as a tape node, plus the value of `h`.
pub fn constraint_penalty(tape: &mut Tape, a: Var, state: &TrainState) -> Result<(Var, f64)> {
    let h = acyclicity_expm_var(tape, a)?;
    let hv = tape.value(h).item();
    let sq = tape.square(h)?;
    let quad = tape.scale(sq, state.penalty / 2.0);
    let lin = tape.scale(h, state.lambda);
    Ok((tape.add(lin, quad)?, hv))
}

/// `L + λ h(A) + (c/2) h(A)²`.
pub fn augmented_loss(tape: &mut Tape, task: Var, a: Var, state: &TrainState) -> Result<(Var, f64)> {
    let (penalty, h) = constraint_penalty(tape, a, state)?;
    Ok((tape.add(task, penalty)?, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::AlConfig;

    #[test]
    fn mse_examples() {
        let target = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let mut tape = Tape::new();
        let p = tape.variable(target.clone());
        let l = mse_loss(&mut tape, p, &target, &[true, true]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let mut tape = Tape::new();
        let p = tape.variable(target.map(|v| v + 1.0));
        let l = mse_loss(&mut tape, p, &target, &[true, true]).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        assert!(mse_loss(&mut tape, p, &target, &[false, false]).is_err());
    }

    #[test]
    fn hidden_nan_targets_are_ignored() {
        let target = Tensor::from_rows(&[[1.0], [f64::NAN]]);
        let mut tape = Tape::new();
        let p = tape.variable(Tensor::from_rows(&[[3.0], [5.0]]));
        let l = mse_loss(&mut tape, p, &target, &[true, false]).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[4.0, 0.0]);
    }

    #[test]
    fn penalty_arithmetic() {
        let mut state = TrainState::new(AlConfig::default());
        state.lambda = 0.0;
        state.penalty = 2.0;
        // Two-cycle with 2 cosh(s²) − 2 = 0.5.
        let s = 1.25f64.acosh().sqrt();
        let a = Tensor::from_rows(&[[0.0, s], [s, 0.0]]);
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(1.5));
        let av = tape.variable(a);
        let (loss, h) = augmented_loss(&mut tape, task, av, &state).unwrap();
        assert!((h - 0.5).abs() < 1e-12);
        assert!((tape.value(loss).item() - 1.75).abs() < 1e-12);
    }
}
