use std::collections::VecDeque;
use std::fmt::Write as _;

use gnflow_diffcore::Tensor;

use crate::error::{Error, Result};

/// Weighted adjacency matrix with `a[i][j] != 0` meaning node `i` is a parent
/// of node `j`. The diagonal is always zero; acyclicity is only guaranteed for
/// matrices built with [`DagMatrix::strict`].
#[derive(Clone, Debug, PartialEq)]
pub struct DagMatrix {
    weights: Tensor,
}

impl DagMatrix {
    pub fn new(weights: Tensor) -> Result<Self> {
        let n = weights.expect_square("DagMatrix")?;
        for i in 0..n {
            if weights.get(i, i) != 0.0 {
                return Err(Error::invalid(format!(
                    "adjacency diagonal must be zero, found {} at ({i}, {i})",
                    weights.get(i, i)
                )));
            }
        }
        if !weights.all_finite() {
            return Err(Error::invalid("adjacency contains non-finite entries"));
        }
        Ok(Self { weights })
    }

    /// Like [`DagMatrix::new`] but additionally requires `h(A) <= 1e-8`.
    pub fn strict(weights: Tensor) -> Result<Self> {
        let dag = Self::new(weights)?;
        let h = super::acyclicity_expm(&dag);
        if h > 1e-8 {
            return Err(Error::invalid(format!("adjacency is not acyclic (h = {h:e})")));
        }
        Ok(dag)
    }

    /// Zeroes the diagonal instead of rejecting it.
    pub fn with_zeroed_diagonal(mut weights: Tensor) -> Result<Self> {
        let n = weights.expect_square("DagMatrix")?;
        for i in 0..n {
            weights.set(i, i, 0.0);
        }
        Self::new(weights)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[n, n]),
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w = Tensor::zeros(&[n, n]);
        for &(i, j, v) in edges {
            if i >= n || j >= n {
                return Err(Error::invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            w.set(i, j, v);
        }
        Self::new(w)
    }

    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_tensor(self) -> Tensor {
        self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }

    /// Edges with `|a_ij| > threshold`.
    pub fn edges(&self, threshold: f64) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.get(i, j).abs() > threshold {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Entries with `|a_ij| <= threshold` set to zero.
    pub fn thresholded(&self, threshold: f64) -> DagMatrix {
        DagMatrix {
            weights: self.weights.map(|v| if v.abs() > threshold { v } else { 0.0 }),
        }
    }

    /// `P A Pᵀ` where node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<DagMatrix> {
        let n = self.n();
        check_permutation(perm, n)?;
        Ok(DagMatrix {
            weights: Tensor::from_fn(n, n, |i, j| self.get(perm[i], perm[j])),
        })
    }

    /// One row per line, entries comma-separated in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let n = self.n();
        let mut s = String::new();
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{}", self.get(i, j)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            rows.push(parse_csv_row(line, k + 1)?);
        }
        let n = rows.len();
        if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::format(k + 1, format!("expected {n} columns, found {}", r.len())));
        }
        Self::new(Tensor::matrix(n, n, rows.concat())?)
    }
}

pub(crate) fn parse_csv_row(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::format(lineno, format!("bad number `{}`: {e}", f.trim())))
        })
        .collect()
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::invalid(format!("permutation of length {} for {n} nodes", perm.len())));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::invalid(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Kahn topological sort on the nonzero pattern.
pub fn is_dag(a: &DagMatrix) -> bool {
    let n = a.n();
    let mut indegree = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if a.get(i, j) != 0.0 {
                indegree[j] += 1;
            }
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&j| indegree[j] == 0).collect();
    let mut visited = 0;
    while let Some(i) = queue.pop_front() {
        visited += 1;
        for j in 0..n {
            if a.get(i, j) != 0.0 {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
    }
    visited == n
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn demo_graph() -> DagMatrix {
        DagMatrix::from_edges(3, &[(0, 1, 0.5), (1, 2, 0.7)]).unwrap()
    }

    #[test]
    fn rejects_nonzero_diagonal() {
        let err = DagMatrix::new(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn is_dag_examples() {
        assert!(is_dag(&DagMatrix::zeros(4)));
        assert!(is_dag(&demo_graph()));
        let cycle = DagMatrix::from_edges(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(!is_dag(&cycle));
        assert!(DagMatrix::strict(cycle.into_tensor()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let a = DagMatrix::from_edges(3, &[(0, 1, 1.0 / 3.0), (2, 1, -1e-17), (0, 2, 0.7)]).unwrap();
        let back = DagMatrix::from_csv(&a.to_csv()).unwrap();
        assert_eq!(a, back);
        assert!(DagMatrix::from_csv("0,1\n0\n").is_err());
    }

    #[test]
    fn permutation_maps_edges() {
        let p = demo_graph().permuted(&[2, 0, 1]).unwrap();
        // new node 1 is old node 0, new node 2 is old node 1
        assert_eq!(p.get(1, 2), 0.5);
        assert_eq!(p.get(2, 0), 0.7);
        assert!(demo_graph().permuted(&[0, 0, 1]).is_err());
    }
}
