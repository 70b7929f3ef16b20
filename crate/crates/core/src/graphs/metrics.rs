use super::DagMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.3;

/// Structure-recovery rates of a learned graph against the truth.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct GraphMetrics {
    pub tpr: f64,
    pub fdr: f64,
    pub fpr: f64,
    pub shd: usize,
}

/// Edge sets are `{(i, j): |m_ij| > threshold}`. TPR is 1 when the truth has
/// no edges. SHD counts, per unordered node pair, the edits needed to turn the
/// learned edges into the true ones, with a single flipped edge costing one
/// reversal.
pub fn graph_metrics(learned: &DagMatrix, truth: &DagMatrix, threshold: f64) -> Result<GraphMetrics> {
    let n = truth.n();
    if learned.n() != n {
        return Err(Error::invalid(format!(
            "graph sizes differ: learned {} vs truth {n}",
            learned.n()
        )));
    }
    if !(threshold >= 0.0) {
        return Err(Error::invalid(format!("threshold must be non-negative, got {threshold}")));
    }
    let l = |i: usize, j: usize| learned.get(i, j).abs() > threshold;
    let t = |i: usize, j: usize| truth.get(i, j).abs() > threshold;

    let (mut true_edges, mut learned_edges, mut hits) = (0usize, 0usize, 0usize);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            true_edges += t(i, j) as usize;
            learned_edges += l(i, j) as usize;
            hits += (t(i, j) && l(i, j)) as usize;
        }
    }
    let false_edges = learned_edges - hits;
    let non_edges = n * n.saturating_sub(1) - true_edges;

    let mut shd = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let (lf, lb, tf, tb) = (l(i, j), l(j, i), t(i, j), t(j, i));
            if (lf, lb) == (tf, tb) {
                continue;
            }
            let reversed = lf != lb && tf != tb && lf == tb;
            shd += if reversed {
                1
            } else {
                (lf != tf) as usize + (lb != tb) as usize
            };
        }
    }

    Ok(GraphMetrics {
        tpr: if true_edges == 0 {
            1.0
        } else {
            hits as f64 / true_edges as f64
        },
        fdr: false_edges as f64 / learned_edges.max(1) as f64,
        fpr: false_edges as f64 / non_edges.max(1) as f64,
        shd,
    })
}
