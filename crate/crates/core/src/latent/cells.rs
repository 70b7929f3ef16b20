use gnflow_diffcore::{Bound, ParamStore, Tape, Var};

use crate::error::Result;
use crate::flows::Linear;
use crate::rng::Rng;

fn gate(tape: &mut Tape, z: Var, k: usize, h: usize) -> Result<Var> {
    let cols: Vec<usize> = (k * h..(k + 1) * h).collect();
    Ok(tape.gather_cols(z, &cols)?)
}

/// LSTM cell acting row-wise.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.input"), input, 4 * hidden, true),
            recurrent: Linear::new(store, rng, &format!("{name}.recurrent"), hidden, 4 * hidden, false),
            hidden,
        }
    }

    /// One step from `(h, c)` on input `x`; returns `(h', c')`.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let zx = self.input.forward(tape, bound, x)?;
        let zh = self.recurrent.forward(tape, bound, h)?;
        let z = tape.add(zx, zh)?;
        let n = self.hidden;
        let i = gate(tape, z, 0, n)?;
        let i = tape.sigmoid(i);
        let f = gate(tape, z, 1, n)?;
        let f = tape.sigmoid(f);
        let g = gate(tape, z, 2, n)?;
        let g = tape.tanh(g);
        let o = gate(tape, z, 3, n)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c2 = tape.add(keep, write)?;
        let tc = tape.tanh(c2);
        Ok((tape.mul(o, tc)?, c2))
    }
}

/// GRU cell acting row-wise: `h' = h + u ⊙ (n − h)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.input"), input, 3 * hidden, true),
            recurrent: Linear::new(store, rng, &format!("{name}.recurrent"), hidden, 3 * hidden, false),
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Result<Var> {
        let zx = self.input.forward(tape, bound, x)?;
        let zh = self.recurrent.forward(tape, bound, h)?;
        let n = self.hidden;
        let (xr, xu, xn) = (gate(tape, zx, 0, n)?, gate(tape, zx, 1, n)?, gate(tape, zx, 2, n)?);
        let (hr, hu, hn) = (gate(tape, zh, 0, n)?, gate(tape, zh, 1, n)?, gate(tape, zh, 2, n)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let u = tape.add(xu, hu)?;
        let u = tape.sigmoid(u);
        let rh = tape.mul(r, hn)?;
        let cand = tape.add(xn, rh)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(u, delta)?;
        Ok(tape.add(h, step)?)
    }
}
