use gnflow_diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::Result;
use crate::rng::Rng;

/// Dense layer acting row-wise: `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let k = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-k..k));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            let b = Tensor::from_fn(1, fan_out, |_, _| rng.random_range(-k..k));
            store.add(format!("{name}.bias"), b)
        });
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        Ok(match self.bias {
            Some(b) => tape.add_row(y, bound.var(b))?,
            None => y,
        })
    }
}

/// Stack of linear layers with tanh between them; the last layer is linear
/// unless `activate_last` is set.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
}

impl Mlp {
    /// `sizes` lists the layer widths including input and output.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        sizes: &[usize],
        final_bias: bool,
        activate_last: bool,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, rng, &format!("{name}.{k}"), w[0], w[1], k < last || final_bias))
            .collect();
        Self { layers, activate_last }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if k < last || self.activate_last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().map(|l| l.weight)
    }
}

/// Layer widths `[input, hidden × layers, output]`.
pub(crate) fn widths(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend(std::iter::repeat_n(hidden, layers));
    v.push(output);
    v
}
