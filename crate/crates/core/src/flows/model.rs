use std::fmt;
use std::str::FromStr;

use gnflow_diffcore::{clip_spectral, Bound, ParamId, ParamStore, Tape, Tensor, Var};

use super::blocks::{CouplingBlock, Ctx, GruBlock, Initial, ResnetBlock, Widths};
use crate::error::{Error, Result};
use crate::graphs::{normalize_adjacency_var, DagMatrix};
use crate::rng::{stream, streams};

pub(crate) const CLIP_ITERS: usize = 100;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Resnet,
    Gru,
    Coupling,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Resnet, Architecture::Gru, Architecture::Coupling];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Resnet => "resnet",
            Architecture::Gru => "gru",
            Architecture::Coupling => "coupling",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture `{s}` (expected resnet, gru, or coupling)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub arch: Architecture,
    pub nodes: usize,
    pub features: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub gcn_hidden: usize,
    pub graph: bool,
    pub blocks: usize,
    pub lipschitz_bound: f64,
    pub enforce_contraction: bool,
    pub gru_alpha: f64,
    pub gru_beta: f64,
    pub strict_invertibility: bool,
    pub trunk_layers: usize,
    pub head_layers: usize,
}

impl FlowConfig {
    pub fn new(arch: Architecture, nodes: usize, features: usize) -> Self {
        Self {
            arch,
            nodes,
            features,
            hidden: 64,
            hidden_layers: 2,
            gcn_hidden: 32,
            graph: true,
            blocks: if arch == Architecture::Coupling { 2 } else { 1 },
            lipschitz_bound: 0.9,
            enforce_contraction: arch != Architecture::Coupling,
            gru_alpha: 2.0 / 11.0,
            gru_beta: 1.0,
            strict_invertibility: true,
            trunk_layers: 1,
            head_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("features", self.features),
            ("hidden", self.hidden),
            ("gcn_hidden", self.gcn_hidden),
            ("blocks", self.blocks),
            ("trunk_layers", self.trunk_layers),
            ("head_layers", self.head_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !(self.lipschitz_bound > 0.0 && self.lipschitz_bound < 1.0) {
            return Err(Error::invalid(format!(
                "lipschitz_bound must lie in (0, 1), got {}",
                self.lipschitz_bound
            )));
        }
        if self.arch == Architecture::Gru {
            let (a, b) = (self.gru_alpha, self.gru_beta);
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::invalid("GRU flow alpha and beta must be positive"));
            }
            // 1e-12 admits the boundary 2/11 · 11 despite rounding.
            if self.strict_invertibility && a * (5.0 * b + 6.0) > 2.0 + 1e-12 {
                return Err(Error::invalid(format!(
                    "alpha (5 beta + 6) = {} exceeds 2; the GRU flow is not guaranteed invertible",
                    a * (5.0 * b + 6.0)
                )));
            }
        }
        Ok(())
    }

    /// Width of the space the blocks act on: one extra zero channel when a
    /// coupling flow has a single feature.
    pub fn working_width(&self) -> usize {
        if self.arch == Architecture::Coupling && self.features == 1 {
            2
        } else {
            self.features
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("arch", self.arch.to_string()),
            ("nodes", self.nodes.to_string()),
            ("features", self.features.to_string()),
            ("hidden", self.hidden.to_string()),
            ("hidden_layers", self.hidden_layers.to_string()),
            ("gcn_hidden", self.gcn_hidden.to_string()),
            ("graph", self.graph.to_string()),
            ("blocks", self.blocks.to_string()),
            ("lipschitz_bound", self.lipschitz_bound.to_string()),
            ("enforce_contraction", self.enforce_contraction.to_string()),
            ("gru_alpha", self.gru_alpha.to_string()),
            ("gru_beta", self.gru_beta.to_string()),
            ("strict_invertibility", self.strict_invertibility.to_string()),
            ("trunk_layers", self.trunk_layers.to_string()),
            ("head_layers", self.head_layers.to_string()),
        ]
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "arch" => self.arch = value.parse()?,
            "nodes" => self.nodes = parse(key, value)?,
            "features" => self.features = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "hidden_layers" => self.hidden_layers = parse(key, value)?,
            "gcn_hidden" => self.gcn_hidden = parse(key, value)?,
            "graph" => self.graph = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "lipschitz_bound" => self.lipschitz_bound = parse(key, value)?,
            "enforce_contraction" => self.enforce_contraction = parse(key, value)?,
            "gru_alpha" => self.gru_alpha = parse(key, value)?,
            "gru_beta" => self.gru_beta = parse(key, value)?,
            "strict_invertibility" => self.strict_invertibility = parse(key, value)?,
            "trunk_layers" => self.trunk_layers = parse(key, value)?,
            "head_layers" => self.head_layers = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::invalid(format!("bad value `{value}` for `{key}`: {e}")))
}

/// Per-row time column `t` and `φ(t) = tanh(t)` for the flow blocks.
pub(crate) fn time_inputs(tape: &mut Tape, times: &[f64]) -> Result<(Var, Var)> {
    if let Some(t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::invalid(format!("flow time must be finite and non-negative, got {t}")));
    }
    let r = times.len();
    let t = tape.constant(Tensor::matrix(r, 1, times.to_vec())?);
    let phi = tape.constant(Tensor::matrix(r, 1, times.iter().map(|t| t.tanh()).collect())?);
    Ok((t, phi))
}

#[derive(Clone, Debug)]
enum Block {
    Resnet(ResnetBlock),
    Gru(GruBlock),
    Coupling(CouplingBlock),
}

/// A stack of flow blocks plus (optionally) the adjacency they condition on.
#[derive(Clone, Debug)]
pub struct FlowModel {
    config: FlowConfig,
    store: ParamStore,
    adjacency: Option<ParamId>,
    blocks: Vec<Block>,
}

impl FlowModel {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, streams::INIT);
        let mut store = ParamStore::new();
        let n = config.nodes;
        let adjacency = config.graph.then(|| store.add("adjacency", Tensor::zeros(&[n, n])));
        let width = config.working_width();
        let w = Widths {
            features: width,
            hidden: config.hidden,
            layers: config.hidden_layers,
            gcn_hidden: config.gcn_hidden,
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for k in 0..config.blocks {
            let name = format!("block{k}");
            let block = match config.arch {
                Architecture::Resnet => Block::Resnet(ResnetBlock::new(&mut store, &mut rng, &name, w, config.graph)),
                Architecture::Gru => Block::Gru(GruBlock::new(
                    &mut store,
                    &mut rng,
                    &name,
                    w,
                    config.graph,
                    config.gru_alpha,
                    config.gru_beta,
                )),
                Architecture::Coupling => {
                    let (even, odd): (Vec<usize>, Vec<usize>) = (0..width).partition(|c| c % 2 == 0);
                    // With an augmented channel the first block updates it
                    // from the data channel, so the alternation starts at U = {1}.
                    let (u, v) = if (k % 2 == 0) != (config.features == 1) {
                        (even, odd)
                    } else {
                        (odd, even)
                    };
                    Block::Coupling(CouplingBlock::new(
                        &mut store,
                        &mut rng,
                        &name,
                        w,
                        u,
                        v,
                        config.trunk_layers,
                        config.head_layers,
                        config.graph,
                    ))
                }
            };
            blocks.push(block);
        }
        let mut model = Self {
            config,
            store,
            adjacency,
            blocks,
        };
        if model.config.enforce_contraction {
            model.enforce_contraction()?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn adjacency_param(&self) -> Option<ParamId> {
        self.adjacency
    }

    pub fn adjacency(&self) -> Option<DagMatrix> {
        self.adjacency
            .map(|id| DagMatrix::with_zeroed_diagonal(self.store.get(id).clone()).expect("adjacency is square"))
    }

    pub fn set_adjacency(&mut self, a: &DagMatrix) -> Result<()> {
        let id = self
            .adjacency
            .ok_or_else(|| Error::invalid("model was built without a graph branch"))?;
        self.store.set(id, a.weights().clone())?;
        Ok(())
    }

    /// Linear weights subject to spectral clipping, with their bounds. GCN
    /// weights get `√bound / 2` each so the whole encoder is `bound`-Lipschitz
    /// given `‖Â‖₂ ≤ 2`.
    pub fn clipped_weights(&self) -> Vec<(ParamId, f64)> {
        let b = self.config.lipschitz_bound;
        let g = b.sqrt() / 2.0;
        let mut out = Vec::new();
        for block in &self.blocks {
            let (weights, gcn) = match block {
                Block::Resnet(r) => (r.weights(), r.gcn.as_ref()),
                Block::Gru(r) => (r.weights(), r.gcn.as_ref()),
                Block::Coupling(r) => (r.weights(), r.gcn.as_ref()),
            };
            out.extend(weights.into_iter().map(|id| (id, b)));
            if let Some(gcn) = gcn {
                out.push((gcn.w, g));
                out.push((gcn.u, g));
            }
        }
        out
    }

    /// Spectrally clips every linear weight to its bound.
    pub fn enforce_contraction(&mut self) -> Result<()> {
        for (id, bound) in self.clipped_weights() {
            let clipped = clip_spectral(self.store.get(id), bound, CLIP_ITERS)?;
            self.store.set(id, clipped)?;
        }
        Ok(())
    }

    /// Runs after every optimizer step: re-zeroes the adjacency diagonal and
    /// clips weights when contraction is enforced.
    pub fn post_step(&mut self) -> Result<()> {
        if let Some(id) = self.adjacency {
            let n = self.config.nodes;
            self.store.update(id, |a| {
                for i in 0..n {
                    a.set(i, i, 0.0);
                }
            });
        }
        if self.config.enforce_contraction {
            self.enforce_contraction()?;
        }
        Ok(())
    }

    /// `Â` as a tape node (differentiable in the adjacency when it is
    /// trainable), or `None` for graph-free models.
    pub fn normalized_adjacency(&self, tape: &mut Tape, bound: &Bound) -> Result<Option<Var>> {
        match self.adjacency {
            Some(id) => Ok(Some(normalize_adjacency_var(tape, bound.var(id))?)),
            None => Ok(None),
        }
    }

    fn augment(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.config.working_width() == self.config.features {
            return Ok(x);
        }
        let zeros = tape.constant(Tensor::zeros(&[tape.value(x).rows(), 1]));
        Ok(tape.concat_cols(&[x, zeros])?)
    }

    fn project(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        if self.config.working_width() == self.config.features {
            return Ok(y);
        }
        Ok(tape.gather_cols(y, &[0])?)
    }

    fn check_rows(&self, rows: usize, times: usize) -> Result<()> {
        if rows % self.config.nodes != 0 || rows != times {
            return Err(Error::invalid(format!(
                "{rows} input rows with {times} times for {} nodes",
                self.config.nodes
            )));
        }
        Ok(())
    }

    fn run_blocks(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &Ctx,
        mut x: Var,
        init: Option<&Initial>,
    ) -> Result<Var> {
        for (k, block) in self.blocks.iter().enumerate() {
            let init = if k == 0 { init } else { None };
            x = match block {
                Block::Resnet(b) => b.forward(tape, bound, ctx, x, init)?,
                Block::Gru(b) => b.forward(tape, bound, ctx, x, init)?,
                Block::Coupling(b) => b.forward(tape, bound, ctx, x, init)?,
            };
        }
        Ok(x)
    }

    /// `F(t, X, A)` for stacked n-row blocks; `times[r]` is the time of row
    /// `r`. Masked rows are cut out of the graph convolution.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        times: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let ahat = self.normalized_adjacency(tape, bound)?;
        self.forward_with(tape, bound, ahat, x, times, mask)
    }

    /// Like [`FlowModel::forward`] with an explicit `Â` (ignored by graph-free
    /// models).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ahat: Option<Var>,
        x: Var,
        times: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        self.check_rows(tape.value(x).rows(), times.len())?;
        let (t, phi) = time_inputs(tape, times)?;
        let ctx = Ctx { ahat, t, phi, mask };
        let xa = self.augment(tape, x)?;
        let y = self.run_blocks(tape, bound, &ctx, xa, None)?;
        self.project(tape, y)
    }

    /// Predictions `F(t_j, X₀, A)` for every sample, time, and node. `x0`
    /// stacks the samples' initial conditions (n rows each); the output rows
    /// are ordered (sample, time, node).
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, x0: Var, times: &[&[f64]]) -> Result<Var> {
        let n = self.config.nodes;
        if tape.value(x0).rows() != n * times.len() {
            return Err(Error::invalid(format!(
                "{} initial-condition rows for {} samples of {n} nodes",
                tape.value(x0).rows(),
                times.len()
            )));
        }
        let mut rows = Vec::new();
        let mut row_times = Vec::new();
        for (s, ts) in times.iter().enumerate() {
            for &t in ts.iter() {
                for i in 0..n {
                    rows.push(s * n + i);
                    row_times.push(t);
                }
            }
        }
        let ahat = self.normalized_adjacency(tape, bound)?;
        let (t, phi) = time_inputs(tape, &row_times)?;
        let ctx = Ctx {
            ahat,
            t,
            phi,
            mask: None,
        };
        let x0a = self.augment(tape, x0)?;
        let x = tape.gather_rows(x0a, &rows)?;
        let init = Initial { x0: x0a, rows: &rows };
        let y = self.run_blocks(tape, bound, &ctx, x, Some(&init))?;
        self.project(tape, y)
    }

    /// `F(t, X, A)` for a single n×d state, outside any training tape.
    pub fn evaluate(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let times = vec![t; x.rows()];
        let y = self.forward(&mut tape, &bound, xv, &times, None)?;
        Ok(tape.value(y).clone())
    }

    /// The term multiplied by `φ(t)` in the first block: `g` for the ResNet
    /// flow, `h¹ ⊙ h²` for the GRU flow.
    pub fn residual(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        self.check_rows(x.rows(), x.rows())?;
        let ahat = self.normalized_adjacency(&mut tape, &bound)?;
        let (tv, phi) = time_inputs(&mut tape, &vec![t; x.rows()])?;
        let ctx = Ctx {
            ahat,
            t: tv,
            phi,
            mask: None,
        };
        let xv = tape.constant(x.clone());
        let g = match &self.blocks[0] {
            Block::Resnet(b) => b.residual(&mut tape, &bound, &ctx, xv, None)?,
            Block::Gru(b) => b.residual(&mut tape, &bound, &ctx, xv, None)?,
            Block::Coupling(_) => return Err(Error::invalid("coupling flows have no additive residual")),
        };
        Ok(tape.value(g).clone())
    }

    /// Coupling forward pass on the working (possibly augmented) space.
    pub fn coupling_forward(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        self.coupling_pass(t, x, false)
    }

    /// Exact inverse of [`FlowModel::coupling_forward`], block by block in
    /// reverse order.
    pub fn invert_coupling(&self, t: f64, y: &Tensor) -> Result<Tensor> {
        self.coupling_pass(t, y, true)
    }

    fn coupling_pass(&self, t: f64, x: &Tensor, inverse: bool) -> Result<Tensor> {
        if self.config.arch != Architecture::Coupling {
            return Err(Error::invalid("not a coupling flow"));
        }
        let width = self.config.working_width();
        if x.cols() != width {
            return Err(Error::invalid(format!("expected {width} columns, got {}", x.cols())));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        self.check_rows(x.rows(), x.rows())?;
        let ahat = self.normalized_adjacency(&mut tape, &bound)?;
        let (tv, phi) = time_inputs(&mut tape, &vec![t; x.rows()])?;
        let ctx = Ctx {
            ahat,
            t: tv,
            phi,
            mask: None,
        };
        let mut v = tape.constant(x.clone());
        let blocks: Vec<&CouplingBlock> = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Coupling(c) => c,
                _ => unreachable!(),
            })
            .collect();
        if inverse {
            for b in blocks.iter().rev() {
                v = b.inverse(&mut tape, &bound, &ctx, v)?;
            }
        } else {
            for b in blocks {
                v = b.forward(&mut tape, &bound, &ctx, v, None)?;
            }
        }
        Ok(tape.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_boundary_is_admitted_and_violation_rejected() {
        let mut c = FlowConfig::new(Architecture::Gru, 3, 1);
        assert!(c.validate().is_ok());
        c.gru_alpha = 0.2;
        assert!(c.validate().is_err());
        c.strict_invertibility = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut c = FlowConfig::new(Architecture::Coupling, 4, 2);
        c.hidden = 17;
        c.lipschitz_bound = 0.123456789;
        let mut d = FlowConfig::new(Architecture::Resnet, 1, 1);
        for (k, v) in c.to_pairs() {
            assert!(d.set(k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(!d.set("nope", "1").unwrap());
        assert!("lstm".parse::<Architecture>().is_err());
    }

    #[test]
    fn rejects_negative_time() {
        let m = FlowModel::new(FlowConfig::new(Architecture::Resnet, 2, 1), 0).unwrap();
        assert!(m.evaluate(-1.0, &Tensor::zeros(&[2, 1])).is_err());
        assert!(m.evaluate(f64::NAN, &Tensor::zeros(&[2, 1])).is_err());
    }
}
