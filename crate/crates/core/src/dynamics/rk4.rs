use gnflow_diffcore::Tensor;

use crate::error::{Error, Result};

pub const RK4_MAX_STEP: f64 = 1e-3;

/// Classic fourth-order Runge–Kutta from `x0` at `t = 0`, returning the state
/// at each of the sorted, non-negative `times`. Every interval is split into
/// equal substeps no longer than [`RK4_MAX_STEP`].
pub fn rk4_solve<F>(mut rhs: F, x0: &Tensor, times: &[f64]) -> Result<Vec<Tensor>>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::invalid("times must be sorted and non-negative"));
    }
    let axpy = |x: &Tensor, k: &Tensor, s: f64| -> Tensor {
        let mut out = x.clone();
        for (o, v) in out.data_mut().iter_mut().zip(k.data()) {
            *o += s * v;
        }
        out
    };
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let steps = (span / RK4_MAX_STEP).ceil().max(1.0) as usize;
            let h = span / steps as f64;
            for k in 0..steps {
                let tk = t + k as f64 * h;
                let k1 = rhs(tk, &x)?;
                let k2 = rhs(tk + h / 2.0, &axpy(&x, &k1, h / 2.0))?;
                let k3 = rhs(tk + h / 2.0, &axpy(&x, &k2, h / 2.0))?;
                let k4 = rhs(tk + h, &axpy(&x, &k3, h))?;
                let data = x.data_mut();
                for i in 0..data.len() {
                    data[i] += h / 6.0 * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
                }
                if !x.all_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite state at t = {}",
                        tk + h
                    )));
                }
            }
            t = target;
        }
        out.push(x.clone());
    }
    Ok(out)
}
