use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use gnflow_diffcore::Tensor;

use super::rk4_solve;
use crate::error::{Error, Result};
use crate::graphs::{is_dag, DagMatrix};

/// Default Sink dynamics matrix.
pub const SINK_DYNAMICS: [[f64; 2]; 2] = [[-4.0, 10.0], [-3.0, 2.0]];

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum SystemKind {
    Sink,
    Triangle,
    Sawtooth,
    Square,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [SystemKind::Sink, SystemKind::Triangle, SystemKind::Sawtooth, SystemKind::Square];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Sink => "sink",
            SystemKind::Triangle => "triangle",
            SystemKind::Sawtooth => "sawtooth",
            SystemKind::Square => "square",
        }
    }

    pub fn features(self) -> usize {
        match self {
            SystemKind::Sink => 2,
            _ => 1,
        }
    }

    /// Range of the uniform initial-condition distribution.
    pub fn initial_range(self) -> (f64, f64) {
        match self {
            SystemKind::Sink => (0.0, 1.0),
            _ => (-2.0, 2.0),
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown system `{s}` (expected sink, triangle, sawtooth, or square)")))
    }
}

/// A system kind together with its interaction graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub adjacency: DagMatrix,
    /// Sink only.
    pub dynamics_matrix: Option<Tensor>,
}

impl SystemSpec {
    pub fn new(kind: SystemKind, adjacency: DagMatrix) -> Result<Self> {
        if !is_dag(&adjacency) {
            return Err(Error::invalid("system graph must be acyclic"));
        }
        let dynamics_matrix = (kind == SystemKind::Sink).then(|| Tensor::from_rows(&SINK_DYNAMICS));
        Ok(Self {
            kind,
            adjacency,
            dynamics_matrix,
        })
    }

    pub fn with_dynamics_matrix(mut self, b: Tensor) -> Result<Self> {
        if self.kind != SystemKind::Sink {
            return Err(Error::invalid("only the sink system has a dynamics matrix"));
        }
        if b.shape() != [2, 2] {
            return Err(Error::invalid(format!("dynamics matrix must be 2×2, got {:?}", b.shape())));
        }
        self.dynamics_matrix = Some(b);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    pub fn d(&self) -> usize {
        self.kind.features()
    }

    /// States at each of the sorted `times`, starting from `x0` at `t = 0`.
    pub fn trajectory(&self, x0: &Tensor, times: &[f64]) -> Result<Vec<Tensor>> {
        if x0.shape() != [self.n(), self.d()] {
            return Err(Error::invalid(format!(
                "initial condition shape {:?}, expected [{}, {}]",
                x0.shape(),
                self.n(),
                self.d()
            )));
        }
        let a = &self.adjacency;
        match self.kind {
            SystemKind::Sink => {
                let b = self.dynamics_matrix.as_ref().expect("sink has a dynamics matrix");
                rk4_solve(|t, x| sink_rhs(t, x, a, b), x0, times)
            }
            SystemKind::Triangle => times.iter().map(|&t| triangle_solution(t, x0, a)).collect(),
            SystemKind::Sawtooth => times.iter().map(|&t| sawtooth_solution(t, x0, a)).collect(),
            SystemKind::Square => times.iter().map(|&t| square_solution(t, x0, a)).collect(),
        }
    }
}

/// `(I − Aᵀ) X Bᵀ`.
pub fn sink_rhs(_t: f64, x: &Tensor, a: &DagMatrix, b: &Tensor) -> Result<Tensor> {
    let n = a.n();
    if x.shape() != [n, 2] || b.shape() != [2, 2] {
        return Err(Error::invalid(format!(
            "sink_rhs expects X: [{n}, 2] and B: [2, 2], got {:?} and {:?}",
            x.shape(),
            b.shape()
        )));
    }
    let y = x.matmul_nt(b)?;
    Ok(minus_parents(a, &y))
}

/// `(I − Aᵀ) Y`: each node minus the weighted sum of its parents.
fn minus_parents(a: &DagMatrix, y: &Tensor) -> Tensor {
    let (n, d) = (y.rows(), y.cols());
    let mut out = y.clone();
    for i in 0..n {
        for j in 0..n {
            let w = a.get(i, j);
            if w != 0.0 {
                for k in 0..d {
                    out.set(j, k, out.get(j, k) - w * y.get(i, k));
                }
            }
        }
    }
    out
}

/// `∫₀ᵗ sign(sin u) du`, a triangle wave with period 2π and peak π.
pub fn triangle_wave(t: f64) -> f64 {
    PI - ((t.rem_euclid(2.0 * PI)) - PI).abs()
}

fn forced(t: f64, x0: &Tensor, a: &DagMatrix, forcing: f64) -> Result<Tensor> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("time must be non-negative, got {t}")));
    }
    if x0.shape() != [a.n(), 1] {
        return Err(Error::invalid(format!("expected [{}, 1] initial condition, got {:?}", a.n(), x0.shape())));
    }
    Ok(minus_parents(a, &x0.map(|v| v + forcing)))
}

/// `(I − Aᵀ)(X₀ + S(t))` with `S` the triangle wave.
pub fn triangle_solution(t: f64, x0: &Tensor, a: &DagMatrix) -> Result<Tensor> {
    forced(t, x0, a, triangle_wave(t))
}

/// `(I − Aᵀ)(X₀ + t − ⌊t⌋)`.
pub fn sawtooth_solution(t: f64, x0: &Tensor, a: &DagMatrix) -> Result<Tensor> {
    forced(t, x0, a, t - t.floor())
}

/// `(I − Aᵀ)(X₀ + sign(sin t))`, with `sign(0) = 0`.
pub fn square_solution(t: f64, x0: &Tensor, a: &DagMatrix) -> Result<Tensor> {
    let s = t.sin();
    let sign = if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    };
    forced(t, x0, a, sign)
}

/// Three-node chain used to illustrate how a DAG couples trajectories:
/// `a₁₂ = 0.5`, `a₂₃ = 0.7`, with `B = [[-4, 5], [-3, 1]]`.
pub fn demo_system() -> SystemSpec {
    let a = DagMatrix::from_edges(3, &[(0, 1, 0.5), (1, 2, 0.7)]).expect("valid demo graph");
    SystemSpec::new(SystemKind::Sink, a)
        .and_then(|s| s.with_dynamics_matrix(Tensor::from_rows(&[[-4.0, 5.0], [-3.0, 1.0]])))
        .expect("valid demo system")
}

pub fn demo_initial_condition() -> Tensor {
    Tensor::from_rows(&[[0.6, 0.5], [0.7, 0.1], [0.2, 0.3]])
}
