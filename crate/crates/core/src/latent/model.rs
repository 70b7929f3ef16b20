use std::fmt;
use std::str::FromStr;

use gnflow_diffcore::{clip_spectral, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

use super::cells::{GruCell, LstmCell};
use super::gaussian::{gaussian_nll, kl_diag, kl_standard, GaussianParams, HALF_LOG_2PI};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::flows::{parse, time_inputs, widths, Ctx, GcnEncoder, Linear, Mlp, ResnetBlock, Widths, CLIP_ITERS};
use crate::graphs::{normalize_adjacency_var, DagMatrix};
use crate::rng::{stream, streams};
use crate::training::Objective;

/// Samples per forward pass when evaluating.
const EVAL_CHUNK: usize = 16;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LatentApproach {
    /// Variational encoder over the whole sequence, decoded by a flow.
    Smoothing,
    /// Recurrent one-step-ahead prediction with observation updates.
    Filtering,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EncoderDirection {
    Forward,
    Backward,
}

impl fmt::Display for LatentApproach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentApproach::Smoothing => "smoothing",
            LatentApproach::Filtering => "filtering",
        })
    }
}

impl FromStr for LatentApproach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoothing" => Ok(LatentApproach::Smoothing),
            "filtering" => Ok(LatentApproach::Filtering),
            _ => Err(Error::invalid(format!("unknown approach `{s}` (expected smoothing or filtering)"))),
        }
    }
}

impl fmt::Display for EncoderDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderDirection::Forward => "forward",
            EncoderDirection::Backward => "backward",
        })
    }
}

impl FromStr for EncoderDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(EncoderDirection::Forward),
            "backward" => Ok(EncoderDirection::Backward),
            _ => Err(Error::invalid(format!("unknown direction `{s}` (expected forward or backward)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentConfig {
    pub approach: LatentApproach,
    pub nodes: usize,
    pub features: usize,
    /// Width of each hidden state.
    pub hidden: usize,
    /// Width of the per-node latent state (smoothing).
    pub latent: usize,
    pub flow_hidden: usize,
    pub flow_layers: usize,
    pub gcn_hidden: usize,
    pub graph: bool,
    /// Order in which the smoothing encoder reads the sequence.
    pub direction: EncoderDirection,
    /// Weight of the observation/posterior KL in the filtering loss.
    pub kl_weight: f64,
    pub n_mc_train: usize,
    pub n_mc_eval: usize,
    /// Spectral bound for the flows' weights.
    pub lipschitz_bound: f64,
    /// Noise seed for validation ELBO estimates.
    pub eval_seed: u64,
}

impl LatentConfig {
    pub fn new(approach: LatentApproach, nodes: usize, features: usize) -> Self {
        Self {
            approach,
            nodes,
            features,
            hidden: 32,
            latent: 32,
            flow_hidden: 32,
            flow_layers: 2,
            gcn_hidden: 16,
            graph: true,
            direction: EncoderDirection::Forward,
            kl_weight: 0.1,
            n_mc_train: 1,
            n_mc_eval: 25,
            lipschitz_bound: 0.9,
            eval_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("features", self.features),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("flow_hidden", self.flow_hidden),
            ("gcn_hidden", self.gcn_hidden),
            ("n_mc_train", self.n_mc_train),
            ("n_mc_eval", self.n_mc_eval),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::invalid("kl_weight must be non-negative"));
        }
        if !(self.lipschitz_bound > 0.0 && self.lipschitz_bound < 1.0) {
            return Err(Error::invalid("lipschitz_bound must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("approach", self.approach.to_string()),
            ("nodes", self.nodes.to_string()),
            ("features", self.features.to_string()),
            ("hidden", self.hidden.to_string()),
            ("latent", self.latent.to_string()),
            ("flow_hidden", self.flow_hidden.to_string()),
            ("flow_layers", self.flow_layers.to_string()),
            ("gcn_hidden", self.gcn_hidden.to_string()),
            ("graph", self.graph.to_string()),
            ("direction", self.direction.to_string()),
            ("kl_weight", self.kl_weight.to_string()),
            ("n_mc_train", self.n_mc_train.to_string()),
            ("n_mc_eval", self.n_mc_eval.to_string()),
            ("lipschitz_bound", self.lipschitz_bound.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
        ]
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "approach" => self.approach = value.trim().parse()?,
            "nodes" => self.nodes = parse(key, value)?,
            "features" => self.features = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "latent" => self.latent = parse(key, value)?,
            "flow_hidden" => self.flow_hidden = parse(key, value)?,
            "flow_layers" => self.flow_layers = parse(key, value)?,
            "gcn_hidden" => self.gcn_hidden = parse(key, value)?,
            "graph" => self.graph = parse(key, value)?,
            "direction" => self.direction = value.trim().parse()?,
            "kl_weight" => self.kl_weight = parse(key, value)?,
            "n_mc_train" => self.n_mc_train = parse(key, value)?,
            "n_mc_eval" => self.n_mc_eval = parse(key, value)?,
            "lipschitz_bound" => self.lipschitz_bound = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Hidden states of a batch on a tape: `H` and, with the graph branch, the
/// graph-informed `H̃`.
#[derive(Copy, Clone, Debug)]
pub struct HiddenPair {
    pub h: Var,
    pub h_tilde: Option<Var>,
}

#[derive(Clone, Debug)]
enum Heads {
    Smoothing {
        cell: LstmCell,
        cell_graph: Option<LstmCell>,
        g: Linear,
        decoder_flow: ResnetBlock,
        decoder: Mlp,
    },
    Filtering {
        cell: GruCell,
        cell_graph: Option<GruCell>,
        g_prep: Linear,
        g_obs: Linear,
        g_post: Linear,
    },
}

/// One observation time across a batch: clean values (hidden rows zeroed),
/// presence flags, elapsed times per row.
struct Step {
    x: Tensor,
    mask: Vec<bool>,
    mask_col: Tensor,
}

fn step_at(batch: &[&Trajectory], n: usize, d: usize, j: usize) -> Result<Step> {
    let rows = batch.len() * n;
    let mut x = Tensor::zeros(&[rows, d]);
    let mut mask = Vec::with_capacity(rows);
    for (s, tr) in batch.iter().enumerate() {
        for i in 0..n {
            let r = j * n + i;
            let m = tr.mask[r];
            if m {
                for c in 0..d {
                    x.set(s * n + i, c, tr.values.get(r, c));
                }
            }
            mask.push(m);
        }
    }
    let mask_col = Tensor::matrix(rows, 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    Ok(Step { x, mask, mask_col })
}

/// `old + m ⊙ (new − old)` row-wise.
fn blend(tape: &mut Tape, new: Var, old: Var, m: Var) -> Result<Var> {
    let d = tape.sub(new, old)?;
    let md = tape.mul_col(d, m)?;
    Ok(tape.add(old, md)?)
}

fn split_halves(tape: &mut Tape, v: Var, w: usize) -> Result<(Var, Var)> {
    let a: Vec<usize> = (0..w).collect();
    let b: Vec<usize> = (w..2 * w).collect();
    Ok((tape.gather_cols(v, &a)?, tape.gather_cols(v, &b)?))
}

fn check_batch(batch: &[&Trajectory], n: usize, d: usize) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let nt = first.times.len();
    for tr in batch {
        if tr.times.len() != nt || tr.values.shape() != [nt * n, d] {
            return Err(Error::invalid("batch samples must share the time count and shape"));
        }
        if tr.observed() == 0 {
            return Err(Error::invalid("sample without any observation"));
        }
    }
    Ok(nt)
}

/// Latent-variable heads with paired recurrent encoders; one of them reads
/// the graph-convolved observations.
#[derive(Clone, Debug)]
pub struct LatentModel {
    config: LatentConfig,
    store: ParamStore,
    adjacency: Option<ParamId>,
    gcn: Option<GcnEncoder>,
    evolve: ResnetBlock,
    g_proj: Linear,
    heads: Heads,
}

impl LatentModel {
    pub fn new(config: LatentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, streams::INIT);
        let mut store = ParamStore::new();
        let (n, d, h) = (config.nodes, config.features, config.hidden);
        let adjacency = config.graph.then(|| store.add("adjacency", Tensor::zeros(&[n, n])));
        let gcn = config
            .graph
            .then(|| GcnEncoder::new(&mut store, &mut rng, "gcn", d, config.gcn_hidden, d));
        let pair_width = if config.graph { 2 * h } else { h };
        let flow_widths = |features| Widths {
            features,
            hidden: config.flow_hidden,
            layers: config.flow_layers,
            gcn_hidden: config.gcn_hidden,
        };
        let evolve = ResnetBlock::new(&mut store, &mut rng, "evolve", flow_widths(pair_width), false);
        let g_proj = Linear::new(&mut store, &mut rng, "g_proj", pair_width, h, false);
        let heads = match config.approach {
            LatentApproach::Smoothing => Heads::Smoothing {
                cell: LstmCell::new(&mut store, &mut rng, "lstm1", d, h),
                cell_graph: config.graph.then(|| LstmCell::new(&mut store, &mut rng, "lstm2", d, h)),
                g: Linear::new(&mut store, &mut rng, "g", h, 2 * config.latent, true),
                decoder_flow: ResnetBlock::new(&mut store, &mut rng, "decoder_flow", flow_widths(config.latent), false),
                decoder: Mlp::new(
                    &mut store,
                    &mut rng,
                    "decoder",
                    &widths(config.latent, config.flow_hidden, 1, d),
                    true,
                    false,
                ),
            },
            LatentApproach::Filtering => Heads::Filtering {
                cell: GruCell::new(&mut store, &mut rng, "gru1", h, h),
                cell_graph: config.graph.then(|| GruCell::new(&mut store, &mut rng, "gru2", h, h)),
                g_prep: Linear::new(&mut store, &mut rng, "g_prep", d + h, h, true),
                g_obs: Linear::new(&mut store, &mut rng, "g_obs", h, 2 * d, true),
                g_post: Linear::new(&mut store, &mut rng, "g_post", h, 2 * d, true),
            },
        };
        let mut model = Self {
            config,
            store,
            adjacency,
            gcn,
            evolve,
            g_proj,
            heads,
        };
        model.clip_flows()?;
        Ok(model)
    }

    pub fn config(&self) -> &LatentConfig {
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

    /// The hidden-state projection `g_proj`.
    pub fn projection(&self) -> &Linear {
        &self.g_proj
    }

    fn flow_weights(&self) -> Vec<ParamId> {
        let mut w = self.evolve.weights();
        if let Heads::Smoothing { decoder_flow, .. } = &self.heads {
            w.extend(decoder_flow.weights());
        }
        w
    }

    fn clip_flows(&mut self) -> Result<()> {
        for id in self.flow_weights() {
            let c = clip_spectral(self.store.get(id), self.config.lipschitz_bound, CLIP_ITERS)?;
            self.store.set(id, c)?;
        }
        Ok(())
    }

    fn ahat(&self, tape: &mut Tape, bound: &Bound) -> Result<Option<Var>> {
        self.adjacency
            .map(|id| normalize_adjacency_var(tape, bound.var(id)))
            .transpose()
    }

    /// `H' = g_proj(F(Δt, H ‖ H̃))` with the flow evaluated at each row's
    /// elapsed time.
    pub fn evolve_hidden(&self, tape: &mut Tape, bound: &Bound, pair: HiddenPair, elapsed: &[f64]) -> Result<Var> {
        let x = match pair.h_tilde {
            Some(ht) => tape.concat_cols(&[pair.h, ht])?,
            None => pair.h,
        };
        let (t, phi) = time_inputs(tape, elapsed)?;
        let ctx = Ctx {
            ahat: None,
            t,
            phi,
            mask: None,
        };
        let y = self.evolve.forward(tape, bound, &ctx, x, None)?;
        self.g_proj.forward(tape, bound, y)
    }

    fn zeros(&self, tape: &mut Tape, rows: usize) -> Var {
        tape.constant(Tensor::zeros(&[rows, self.config.hidden]))
    }

    fn graph_input(&self, tape: &mut Tape, bound: &Bound, ahat: Option<Var>, x: Var, mask: &[bool]) -> Result<Option<Var>> {
        match (&self.gcn, ahat) {
            (Some(gcn), Some(ahat)) => Ok(Some(gcn.forward(tape, bound, ahat, x, Some(mask))?)),
            _ => Ok(None),
        }
    }

    /// `[μ, log σ]` of `q(Z₀ | X)` per node, stacked over the batch.
    pub fn smooth_encode_var(&self, tape: &mut Tape, bound: &Bound, batch: &[&Trajectory]) -> Result<(Var, Var)> {
        let Heads::Smoothing { cell, cell_graph, g, .. } = &self.heads else {
            return Err(Error::invalid("smoothing encoder requested from a filtering model"));
        };
        let (n, d) = (self.config.nodes, self.config.features);
        let nt = check_batch(batch, n, d)?;
        let rows = batch.len() * n;
        let ahat = self.ahat(tape, bound)?;
        let mut h = self.zeros(tape, rows);
        let mut c = self.zeros(tape, rows);
        let mut ht = cell_graph.as_ref().map(|_| self.zeros(tape, rows));
        let mut ct = cell_graph.as_ref().map(|_| self.zeros(tape, rows));
        let order: Vec<usize> = match self.config.direction {
            EncoderDirection::Forward => (0..nt).collect(),
            EncoderDirection::Backward => (0..nt).rev().collect(),
        };
        let mut prev: Vec<f64> = match self.config.direction {
            EncoderDirection::Forward => vec![0.0; batch.len()],
            EncoderDirection::Backward => batch.iter().map(|tr| tr.times[nt - 1]).collect(),
        };
        for &j in &order {
            let elapsed: Vec<f64> = batch
                .iter()
                .zip(&prev)
                .flat_map(|(tr, p)| std::iter::repeat_n((tr.times[j] - p).abs(), n))
                .collect();
            let evolved = self.evolve_hidden(tape, bound, HiddenPair { h, h_tilde: ht }, &elapsed)?;
            let step = step_at(batch, n, d, j)?;
            let x = tape.constant(step.x);
            let m = tape.constant(step.mask_col);
            let (h_new, c_new) = cell.step(tape, bound, x, evolved, c)?;
            h = blend(tape, h_new, evolved, m)?;
            c = blend(tape, c_new, c, m)?;
            if let (Some(cg), Some(ht_prev), Some(ct_prev)) = (cell_graph, ht, ct) {
                let xt = self.graph_input(tape, bound, ahat, x, &step.mask)?.expect("graph branch present");
                let (hn, cn) = cg.step(tape, bound, xt, evolved, ct_prev)?;
                ht = Some(blend(tape, hn, ht_prev, m)?);
                ct = Some(blend(tape, cn, ct_prev, m)?);
            }
            prev = batch.iter().map(|tr| tr.times[j]).collect();
        }
        let out = g.forward(tape, bound, h)?;
        split_halves(tape, out, self.config.latent)
    }

    /// Posterior parameters of `Z₀` for each sample (n rows per sample).
    pub fn smooth_encode(&self, batch: &[&Trajectory]) -> Result<GaussianParams> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let (mu, ls) = self.smooth_encode_var(&mut tape, &bound, batch)?;
        Ok(GaussianParams {
            mu: tape.value(mu).clone(),
            log_sigma: tape.value(ls).clone(),
        })
    }

    /// Negative ELBO per sample: closed-form KL to `N(0, I)` plus a
    /// Monte-Carlo reconstruction NLL under a unit-variance Gaussian decoder.
    /// Draw `k` uses noise stream `(noise_seed, k)`.
    pub fn elbo_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&Trajectory],
        n_mc: usize,
        noise_seed: u64,
    ) -> Result<Var> {
        let Heads::Smoothing {
            decoder_flow, decoder, ..
        } = &self.heads
        else {
            return Err(Error::invalid("ELBO requested from a filtering model"));
        };
        if n_mc == 0 {
            return Err(Error::invalid("n_mc must be positive"));
        }
        let (n, z) = (self.config.nodes, self.config.latent);
        let (mu, ls) = self.smooth_encode_var(tape, bound, batch)?;
        let kl = kl_standard(tape, mu, ls)?;
        let kl = tape.sum(kl);

        let mut rows = Vec::new();
        let mut times = Vec::new();
        for (s, tr) in batch.iter().enumerate() {
            for &t in &tr.times {
                for i in 0..n {
                    rows.push(s * n + i);
                    times.push(t);
                }
            }
        }
        let values: Vec<&Tensor> = batch.iter().map(|t| &t.values).collect();
        let mask: Vec<bool> = batch.iter().flat_map(|t| t.mask.iter().copied()).collect();
        let (target, weights, _) = crate::training::masked_target(&Tensor::vstack(&values)?, &mask)?;
        let target = tape.constant(target);
        let weights = tape.constant(weights);
        let observed = mask.iter().filter(|m| **m).count() * self.config.features;
        let (t, phi) = time_inputs(tape, &times)?;
        let ctx = Ctx {
            ahat: None,
            t,
            phi,
            mask: None,
        };
        let sigma = tape.exp(ls);
        let mut nll_sum: Option<Var> = None;
        for k in 0..n_mc {
            let mut rng = stream(noise_seed, streams::NOISE + ((k as u64) << 8));
            let eps = Tensor::from_fn(batch.len() * n, z, |_, _| StandardNormal.sample(&mut rng));
            let eps = tape.constant(eps);
            let scaled = tape.mul(sigma, eps)?;
            let z0 = tape.add(mu, scaled)?;
            let zt = tape.gather_rows(z0, &rows)?;
            let zt = decoder_flow.forward(tape, bound, &ctx, zt, None)?;
            let xhat = decoder.forward(tape, bound, zt)?;
            let diff = tape.sub(xhat, target)?;
            let kept = tape.mul_col(diff, weights)?;
            let sq = tape.square(kept)?;
            let s = tape.sum(sq);
            nll_sum = Some(match nll_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let nll = tape.affine(
            nll_sum.expect("n_mc ≥ 1"),
            0.5 / n_mc as f64,
            HALF_LOG_2PI * observed as f64,
        );
        let total = tape.add(kl, nll)?;
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    /// One filtering step: evolve, predict the observation, then update both
    /// hidden states with the (graph-convolved) observation. Rows whose
    /// observation is hidden keep `H = H'` and their previous `H̃`.
    #[allow(clippy::too_many_arguments)]
    pub fn filter_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pair: HiddenPair,
        ahat: Option<Var>,
        x: &Tensor,
        mask: &[bool],
        elapsed: &[f64],
    ) -> Result<(HiddenPair, (Var, Var), (Var, Var))> {
        let Heads::Filtering {
            cell,
            cell_graph,
            g_prep,
            g_obs,
            g_post,
        } = &self.heads
        else {
            return Err(Error::invalid("filter step requested from a smoothing model"));
        };
        let d = self.config.features;
        let (clean, weights, _) = crate::training::masked_target(x, mask)?;
        let xv = tape.constant(clean);
        let m = tape.constant(weights);
        let evolved = self.evolve_hidden(tape, bound, pair, elapsed)?;
        let obs = g_obs.forward(tape, bound, evolved)?;
        let obs = split_halves(tape, obs, d)?;

        let prep = tape.concat_cols(&[xv, evolved])?;
        let input = g_prep.forward(tape, bound, prep)?;
        let h_new = cell.step(tape, bound, input, evolved)?;
        let h = blend(tape, h_new, evolved, m)?;
        let h_tilde = match (cell_graph, pair.h_tilde) {
            (Some(cg), Some(prev)) => {
                let xt = self.graph_input(tape, bound, ahat, xv, mask)?.expect("graph branch present");
                let prep = tape.concat_cols(&[xt, evolved])?;
                let input = g_prep.forward(tape, bound, prep)?;
                let hn = cg.step(tape, bound, input, evolved)?;
                Some(blend(tape, hn, prev, m)?)
            }
            _ => None,
        };
        let post = g_post.forward(tape, bound, h)?;
        let post = split_halves(tape, post, d)?;
        Ok((HiddenPair { h, h_tilde }, obs, post))
    }

    /// Per-sample filtering loss: masked NLL of each observation under the
    /// prediction made before seeing it, plus `kl_weight` times the KL from
    /// that prediction to the post-update Gaussian.
    pub fn filter_loss(&self, tape: &mut Tape, bound: &Bound, batch: &[&Trajectory]) -> Result<Var> {
        let (n, d) = (self.config.nodes, self.config.features);
        let nt = check_batch(batch, n, d)?;
        let rows = batch.len() * n;
        let ahat = self.ahat(tape, bound)?;
        let h = self.zeros(tape, rows);
        let h_tilde = self.config.graph.then(|| self.zeros(tape, rows));
        let mut pair = HiddenPair { h, h_tilde };
        let mut prev = vec![0.0; batch.len()];
        let mut total: Option<Var> = None;
        for j in 0..nt {
            let elapsed: Vec<f64> = batch
                .iter()
                .zip(&prev)
                .flat_map(|(tr, p)| std::iter::repeat_n(tr.times[j] - p, n))
                .collect();
            let step = step_at(batch, n, d, j)?;
            let (next, (mo, lo), (mp, lp)) = self.filter_step(tape, bound, pair, ahat, &step.x, &step.mask, &elapsed)?;
            pair = next;
            let x = tape.constant(step.x);
            let m = tape.constant(step.mask_col);
            let nll = gaussian_nll(tape, x, mo, lo)?;
            let kl = kl_diag(tape, mo, lo, mp, lp)?;
            let kl = tape.scale(kl, self.config.kl_weight);
            let both = tape.add(nll, kl)?;
            let kept = tape.mul_col(both, m)?;
            let s = tape.sum(kept);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            prev = batch.iter().map(|tr| tr.times[j]).collect();
        }
        Ok(tape.scale(total.expect("at least one time"), 1.0 / batch.len() as f64))
    }

    /// Loss used for validation: ELBO with `n_mc_eval` fixed draws, or the
    /// filtering loss; averaged per sample.
    pub fn evaluate(&self, samples: &[&Trajectory]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::invalid("no samples to evaluate"));
        }
        let mut sum = 0.0;
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape);
            let loss = match self.config.approach {
                LatentApproach::Smoothing => {
                    self.elbo_loss(&mut tape, &bound, chunk, self.config.n_mc_eval, self.config.eval_seed)?
                }
                LatentApproach::Filtering => self.filter_loss(&mut tape, &bound, chunk)?,
            };
            sum += tape.value(loss).item() * chunk.len() as f64;
        }
        Ok(sum / samples.len() as f64)
    }
}

impl Objective for LatentModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn adjacency_param(&self) -> Option<ParamId> {
        self.adjacency
    }

    fn batch_loss(&self, tape: &mut Tape, bound: &Bound, batch: &[&Trajectory], noise_seed: u64) -> Result<Var> {
        match self.config.approach {
            LatentApproach::Smoothing => self.elbo_loss(tape, bound, batch, self.config.n_mc_train, noise_seed),
            LatentApproach::Filtering => self.filter_loss(tape, bound, batch),
        }
    }

    fn validation_loss(&self, samples: &[&Trajectory]) -> Result<f64> {
        self.evaluate(samples)
    }

    fn post_step(&mut self) -> Result<()> {
        if let Some(id) = self.adjacency {
            let n = self.config.nodes;
            self.store.update(id, |a| {
                for i in 0..n {
                    a.set(i, i, 0.0);
                }
            });
        }
        self.clip_flows()
    }
}
