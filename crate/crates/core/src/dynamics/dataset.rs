use gnflow_diffcore::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{SystemKind, SystemSpec};
use crate::error::{Error, Result};
use crate::graphs::DagMatrix;
use crate::rng::{stream, streams};

/// Observation window is `[0, MAX_TIME]`.
pub const MAX_TIME: f64 = 10.0;

/// One sample: shared times for all nodes, values and presence per
/// (time, node) in time-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// n×d state at `t = 0`.
    pub initial: Tensor,
    /// (N·n)×d, row `j·n + i` is node `i` at `times[j]`.
    pub values: Tensor,
    /// N·n presence flags aligned with the rows of `values`.
    pub mask: Vec<bool>,
}

impl Trajectory {
    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub kind: SystemKind,
    pub n: usize,
    pub d: usize,
    /// Time points per sample.
    pub num_times: usize,
    pub seed: u64,
    /// Ground-truth graph the data was generated from.
    pub adjacency: DagMatrix,
    pub samples: Vec<Trajectory>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> TrajectoryBatch {
        TrajectoryBatch {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> TrajectoryBatch {
        TrajectoryBatch {
            kind: self.kind,
            n: self.n,
            d: self.d,
            num_times: self.num_times,
            seed: self.seed,
            adjacency: self.adjacency.clone(),
            samples: Vec::new(),
        }
    }

    /// Checks shapes, strictly increasing times in `[0, MAX_TIME]`, and finite
    /// values at observed entries.
    pub fn validate(&self) -> Result<()> {
        if self.adjacency.n() != self.n || self.d != self.kind.features() {
            return Err(Error::invalid("batch header is inconsistent with its graph or system"));
        }
        for (s, tr) in self.samples.iter().enumerate() {
            let nt = tr.times.len();
            if nt != self.num_times
                || tr.initial.shape() != [self.n, self.d]
                || tr.values.shape() != [nt * self.n, self.d]
                || tr.mask.len() != nt * self.n
            {
                return Err(Error::invalid(format!("sample {s} has inconsistent shapes")));
            }
            if tr.times.windows(2).any(|w| w[1] <= w[0])
                || tr.times.iter().any(|t| !(0.0..=MAX_TIME).contains(t))
            {
                return Err(Error::invalid(format!("sample {s} times must increase strictly within [0, {MAX_TIME}]")));
            }
            if !tr.initial.all_finite() {
                return Err(Error::invalid(format!("sample {s} has a non-finite initial condition")));
            }
            for (r, &m) in tr.mask.iter().enumerate() {
                if m && tr.values.row(r).iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("sample {s} has a non-finite observed value")));
                }
            }
        }
        Ok(())
    }
}

fn sorted_times(rng: &mut impl Rng, count: usize) -> Vec<f64> {
    loop {
        let mut t: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..MAX_TIME)).collect();
        t.sort_by(f64::total_cmp);
        if t.windows(2).all(|w| w[1] > w[0]) && t.first().is_none_or(|t| *t > 0.0) {
            return t;
        }
    }
}

/// Draws `samples` trajectories with `num_times` sorted uniform times each;
/// every sample uses its own random stream.
pub fn sample_dataset(spec: &SystemSpec, samples: usize, num_times: usize, seed: u64) -> Result<TrajectoryBatch> {
    if samples == 0 || num_times == 0 {
        return Err(Error::invalid("samples and time points must be positive"));
    }
    let (n, d) = (spec.n(), spec.d());
    let (lo, hi) = spec.kind.initial_range();
    let mut out = Vec::with_capacity(samples);
    for s in 0..samples {
        let mut rng = stream(seed, streams::SAMPLE_BASE + s as u64);
        let initial = Tensor::from_fn(n, d, |_, _| rng.random_range(lo..=hi));
        let times = sorted_times(&mut rng, num_times);
        let states = spec.trajectory(&initial, &times)?;
        let mut data = Vec::with_capacity(num_times * n * d);
        for x in states {
            data.extend_from_slice(x.data());
        }
        out.push(Trajectory {
            values: Tensor::matrix(num_times * n, d, data)?,
            mask: vec![true; num_times * n],
            times,
            initial,
        });
    }
    Ok(TrajectoryBatch {
        kind: spec.kind,
        n,
        d,
        num_times,
        seed,
        adjacency: spec.adjacency.clone(),
        samples: out,
    })
}

/// Hides each (time, node) entry independently with probability `rate`.
/// Hidden values are replaced by NaN.
pub fn apply_missingness(batch: &mut TrajectoryBatch, rate: f64, seed: u64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("missing rate must lie in [0, 1), got {rate}")));
    }
    let mut rng = stream(seed, streams::MISSING);
    let d = batch.d;
    for tr in &mut batch.samples {
        for r in 0..tr.mask.len() {
            if rng.random_bool(rate) {
                tr.mask[r] = false;
                for k in 0..d {
                    tr.values.set(r, k, f64::NAN);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..count` and cuts it by `ratios` (train, validation, test).
pub fn split_indices(count: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut stream(seed, streams::SPLIT));
    let n_train = (ratios[0] * count as f64).round() as usize;
    let n_val = ((ratios[1] * count as f64).round() as usize).min(count - n_train.min(count));
    if n_train == 0 {
        return Err(Error::invalid(format!("{count} samples leave no training data")));
    }
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}
