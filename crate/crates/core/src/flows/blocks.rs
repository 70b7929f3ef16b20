//! Flow blocks. Each maps an R×w matrix of stacked n-row blocks to a matrix
//! of the same shape and is the identity whenever `φ(t) = 0`.

use gnflow_diffcore::{Bound, ParamId, ParamStore, Tape, Var};

use super::gcn::GcnEncoder;
use super::layers::{widths, Mlp};
use crate::error::Result;
use crate::rng::Rng;

/// Per-evaluation inputs shared by all blocks.
pub(crate) struct Ctx<'a> {
    pub ahat: Option<Var>,
    /// R×1 times, appended to MLP inputs.
    pub t: Var,
    /// R×1 `tanh(t)`.
    pub phi: Var,
    pub mask: Option<&'a [bool]>,
}

/// Lets the first block run its GCN once per initial condition instead of
/// once per (time, node) row: rows of the expanded input are `x0[rows[r]]`.
pub(crate) struct Initial<'a> {
    pub x0: Var,
    pub rows: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Widths {
    pub features: usize,
    pub hidden: usize,
    pub layers: usize,
    pub gcn_hidden: usize,
}

fn graph_features(
    tape: &mut Tape,
    bound: &Bound,
    gcn: &GcnEncoder,
    ctx: &Ctx,
    x: Var,
    cols: Option<&[usize]>,
    init: Option<&Initial>,
) -> Result<Var> {
    let ahat = ctx.ahat.expect("graph block evaluated without an adjacency");
    let select = |tape: &mut Tape, v: Var| -> Result<Var> {
        Ok(match cols {
            Some(c) => tape.gather_cols(v, c)?,
            None => v,
        })
    };
    match init {
        Some(init) => {
            let src = select(tape, init.x0)?;
            let g = gcn.forward(tape, bound, ahat, src, None)?;
            Ok(tape.gather_rows(g, init.rows)?)
        }
        None => {
            let src = select(tape, x)?;
            gcn.forward(tape, bound, ahat, src, ctx.mask)
        }
    }
}

fn with_time(tape: &mut Tape, parts: &[Var], t: Var) -> Result<Var> {
    let mut all = parts.to_vec();
    all.push(t);
    Ok(tape.concat_cols(&all)?)
}

/// `X + φ(t) · MLP¹(X ‖ X̃ ‖ t) ⊙ MLP²(X ‖ t)`.
#[derive(Clone, Debug)]
pub struct ResnetBlock {
    pub mlp1: Mlp,
    pub mlp2: Mlp,
    pub gcn: Option<GcnEncoder>,
}

impl ResnetBlock {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, w: Widths, graph: bool) -> Self {
        let d = w.features;
        let gcn = graph.then(|| GcnEncoder::new(store, rng, &format!("{name}.gcn"), d, w.gcn_hidden, d));
        let in1 = if graph { 2 * d + 1 } else { d + 1 };
        let mlp1 = Mlp::new(store, rng, &format!("{name}.mlp1"), &widths(in1, w.hidden, w.layers, d), false, false);
        let mlp2 = Mlp::new(store, rng, &format!("{name}.mlp2"), &widths(d + 1, w.hidden, w.layers, d), false, false);
        Self { mlp1, mlp2, gcn }
    }

    pub(crate) fn residual(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &Ctx,
        x: Var,
        init: Option<&Initial>,
    ) -> Result<Var> {
        let in1 = match &self.gcn {
            Some(gcn) => {
                let xt = graph_features(tape, bound, gcn, ctx, x, None, init)?;
                with_time(tape, &[x, xt], ctx.t)?
            }
            None => with_time(tape, &[x], ctx.t)?,
        };
        let in2 = with_time(tape, &[x], ctx.t)?;
        let a = self.mlp1.forward(tape, bound, in1)?;
        let b = self.mlp2.forward(tape, bound, in2)?;
        Ok(tape.mul(a, b)?)
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &Ctx,
        x: Var,
        init: Option<&Initial>,
    ) -> Result<Var> {
        let g = self.residual(tape, bound, ctx, x, init)?;
        let step = tape.mul_col(g, ctx.phi)?;
        Ok(tape.add(x, step)?)
    }

    pub(crate) fn weights(&self) -> Vec<ParamId> {
        self.mlp1.weights().chain(self.mlp2.weights()).collect()
    }
}

/// `h(t, Y) = z ⊙ (c − Y)` with `r = β σ(f_r)`, `c = tanh(f_c(r ⊙ Y))`,
/// `z = α σ(f_z)`.
#[derive(Clone, Debug)]
pub struct GruUnit {
    pub f_r: Mlp,
    pub f_c: Mlp,
    pub f_z: Mlp,
}

impl GruUnit {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, w: Widths) -> Self {
        let sizes = widths(w.features + 1, w.hidden, w.layers, w.features);
        Self {
            f_r: Mlp::new(store, rng, &format!("{name}.f_r"), &sizes, true, false),
            f_c: Mlp::new(store, rng, &format!("{name}.f_c"), &sizes, true, false),
            f_z: Mlp::new(store, rng, &format!("{name}.f_z"), &sizes, true, false),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, t: Var, y: Var, alpha: f64, beta: f64) -> Result<Var> {
        let yt = with_time(tape, &[y], t)?;
        let fr = self.f_r.forward(tape, bound, yt)?;
        let r = tape.sigmoid(fr);
        let r = tape.scale(r, beta);
        let ry = tape.mul(r, y)?;
        let ryt = with_time(tape, &[ry], t)?;
        let fc = self.f_c.forward(tape, bound, ryt)?;
        let c = tape.tanh(fc);
        let fz = self.f_z.forward(tape, bound, yt)?;
        let z = tape.sigmoid(fz);
        let z = tape.scale(z, alpha);
        let diff = tape.sub(c, y)?;
        Ok(tape.mul(z, diff)?)
    }

    fn weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.f_r.weights().chain(self.f_c.weights()).chain(self.f_z.weights())
    }
}

/// `X + φ(t) · h¹(t, X) ⊙ h²(t, X̃)`; without a graph, `X + φ(t) · h¹(t, X)`.
#[derive(Clone, Debug)]
pub struct GruBlock {
    pub h1: GruUnit,
    pub h2: Option<GruUnit>,
    pub gcn: Option<GcnEncoder>,
    pub alpha: f64,
    pub beta: f64,
}

impl GruBlock {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        w: Widths,
        graph: bool,
        alpha: f64,
        beta: f64,
    ) -> Self {
        let d = w.features;
        let gcn = graph.then(|| GcnEncoder::new(store, rng, &format!("{name}.gcn"), d, w.gcn_hidden, d));
        let h1 = GruUnit::new(store, rng, &format!("{name}.h1"), w);
        let h2 = graph.then(|| GruUnit::new(store, rng, &format!("{name}.h2"), w));
        Self {
            h1,
            h2,
            gcn,
            alpha,
            beta,
        }
    }

    pub(crate) fn residual(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &Ctx,
        x: Var,
        init: Option<&Initial>,
    ) -> Result<Var> {
        let h1 = self.h1.forward(tape, bound, ctx.t, x, self.alpha, self.beta)?;
        match (&self.gcn, &self.h2) {
            (Some(gcn), Some(h2)) => {
                let xt = graph_features(tape, bound, gcn, ctx, x, None, init)?;
                let h2 = h2.forward(tape, bound, ctx.t, xt, self.alpha, self.beta)?;
                Ok(tape.mul(h1, h2)?)
            }
            _ => Ok(h1),
        }
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &Ctx,
        x: Var,
        init: Option<&Initial>,
    ) -> Result<Var> {
        let g = self.residual(tape, bound, ctx, x, init)?;
        let step = tape.mul_col(g, ctx.phi)?;
        Ok(tape.add(x, step)?)
    }

    pub(crate) fn weights(&self) -> Vec<ParamId> {
        let mut w: Vec<_> = self.h1.weights().collect();
        if let Some(h2) = &self.h2 {
            w.extend(h2.weights());
        }
        w
    }
}

/// Affine coupling: columns `u_cols` are scaled by `exp(φ u)` and shifted by
/// `φ v`, where `u, v` depend only on the `v_cols` columns (and their graph
/// encoding); `v_cols` pass through.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub u_cols: Vec<usize>,
    pub v_cols: Vec<usize>,
    pub trunk1: Mlp,
    pub trunk2: Option<Mlp>,
    pub head_u: Mlp,
    pub head_v: Mlp,
    pub gcn: Option<GcnEncoder>,
}

impl CouplingBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        w: Widths,
        u_cols: Vec<usize>,
        v_cols: Vec<usize>,
        trunk_layers: usize,
        head_layers: usize,
        graph: bool,
    ) -> Self {
        let (nu, nv) = (u_cols.len(), v_cols.len());
        let h = w.hidden;
        let trunk = |store: &mut ParamStore, rng: &mut Rng, n: &str| {
            Mlp::new(store, rng, &format!("{name}.{n}"), &widths(nv + 1, h, trunk_layers - 1, h), true, true)
        };
        let trunk1 = trunk(store, rng, "mlp1");
        let gcn = graph.then(|| GcnEncoder::new(store, rng, &format!("{name}.gcn"), nv, w.gcn_hidden, nv));
        let trunk2 = graph.then(|| trunk(store, rng, "mlp2"));
        let feat = if graph { 2 * h } else { h };
        let head = |store: &mut ParamStore, rng: &mut Rng, n: &str| {
            Mlp::new(store, rng, &format!("{name}.{n}"), &widths(feat, h, head_layers - 1, nu), false, false)
        };
        let head_u = head(store, rng, "mlp3");
        let head_v = head(store, rng, "mlp4");
        Self {
            u_cols,
            v_cols,
            trunk1,
            trunk2,
            head_u,
            head_v,
            gcn,
        }
    }

    /// `(u, v)` from the pass-through columns.
    fn scale_shift(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &Ctx,
        x: Var,
        init: Option<&Initial>,
    ) -> Result<(Var, Var)> {
        let xv = tape.gather_cols(x, &self.v_cols)?;
        let in1 = with_time(tape, &[xv], ctx.t)?;
        let mut feat = self.trunk1.forward(tape, bound, in1)?;
        if let (Some(gcn), Some(trunk2)) = (&self.gcn, &self.trunk2) {
            let xt = graph_features(tape, bound, gcn, ctx, x, Some(&self.v_cols), init)?;
            let in2 = with_time(tape, &[xt], ctx.t)?;
            let b = trunk2.forward(tape, bound, in2)?;
            feat = tape.concat_cols(&[feat, b])?;
        }
        let u = self.head_u.forward(tape, bound, feat)?;
        let v = self.head_v.forward(tape, bound, feat)?;
        Ok((u, v))
    }

    /// Reassembles `[U-part, V-part]` into the original column order.
    fn merge(&self, tape: &mut Tape, yu: Var, xv: Var) -> Result<Var> {
        let width = self.u_cols.len() + self.v_cols.len();
        let joined = tape.concat_cols(&[yu, xv])?;
        let mut order = vec![0; width];
        for (k, &c) in self.u_cols.iter().chain(&self.v_cols).enumerate() {
            order[c] = k;
        }
        Ok(tape.gather_cols(joined, &order)?)
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &Ctx,
        x: Var,
        init: Option<&Initial>,
    ) -> Result<Var> {
        let (u, v) = self.scale_shift(tape, bound, ctx, x, init)?;
        let xu = tape.gather_cols(x, &self.u_cols)?;
        let xv = tape.gather_cols(x, &self.v_cols)?;
        let pu = tape.mul_col(u, ctx.phi)?;
        let s = tape.exp(pu);
        let scaled = tape.mul(xu, s)?;
        let shift = tape.mul_col(v, ctx.phi)?;
        let yu = tape.add(scaled, shift)?;
        self.merge(tape, yu, xv)
    }

    /// `X_U = (Y_U − φ v) ⊙ exp(−φ u)`; `u, v` are recomputed from `Y_V = X_V`.
    pub(crate) fn inverse(&self, tape: &mut Tape, bound: &Bound, ctx: &Ctx, y: Var) -> Result<Var> {
        let (u, v) = self.scale_shift(tape, bound, ctx, y, None)?;
        let yu = tape.gather_cols(y, &self.u_cols)?;
        let yv = tape.gather_cols(y, &self.v_cols)?;
        let shift = tape.mul_col(v, ctx.phi)?;
        let centered = tape.sub(yu, shift)?;
        let pu = tape.mul_col(u, ctx.phi)?;
        let npu = tape.neg(pu);
        let s = tape.exp(npu);
        let xu = tape.mul(centered, s)?;
        self.merge(tape, xu, yv)
    }

    pub(crate) fn weights(&self) -> Vec<ParamId> {
        let mut w: Vec<_> = self.trunk1.weights().collect();
        if let Some(t) = &self.trunk2 {
            w.extend(t.weights());
        }
        w.extend(self.head_u.weights());
        w.extend(self.head_v.weights());
        w
    }
}
