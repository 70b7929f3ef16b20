//! Line-oriented dataset files:
//!
//! ```text
//! gnflow-data-v1 <kind> <n> <d> <N> <samples> <seed>
//! per sample:
//!   <N comma-separated times>
//!   <n·d initial values>
//!   N lines of <n·d values>, node-major
//!   N lines of <n mask bits>, e.g. 10111
//! adjacency
//! <n CSV rows of the ground-truth graph>
//! ```

use std::fmt::Write as _;

use gnflow_diffcore::Tensor;

use super::{Trajectory, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::graphs::dag::parse_csv_row;
use crate::graphs::DagMatrix;

pub const DATA_VERSION: &str = "gnflow-data-v1";

fn join(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    parts.join(",")
}

pub fn write_dataset(batch: &TrajectoryBatch) -> String {
    let (n, d) = (batch.n, batch.d);
    let mut s = String::new();
    writeln!(
        s,
        "{DATA_VERSION} {} {n} {d} {} {} {}",
        batch.kind,
        batch.num_times,
        batch.samples.len(),
        batch.seed
    )
    .unwrap();
    for tr in &batch.samples {
        s.push_str(&join(&tr.times));
        s.push('\n');
        s.push_str(&join(tr.initial.data()));
        s.push('\n');
        for j in 0..tr.times.len() {
            s.push_str(&join(&tr.values.data()[j * n * d..(j + 1) * n * d]));
            s.push('\n');
        }
        for j in 0..tr.times.len() {
            s.extend(tr.mask[j * n..(j + 1) * n].iter().map(|&m| if m { '1' } else { '0' }));
            s.push('\n');
        }
    }
    s.push_str("adjacency\n");
    s.push_str(&batch.adjacency.to_csv());
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((k, l)) => {
                self.last = k + 1;
                Ok((k + 1, l))
            }
            None => Err(Error::format(self.last + 1, format!("unexpected end of file, expected {what}"))),
        }
    }

    fn numbers(&mut self, what: &str, count: usize) -> Result<Vec<f64>> {
        let (no, line) = self.next(what)?;
        let v = parse_csv_row(line, no)?;
        if v.len() != count {
            return Err(Error::format(no, format!("{what}: expected {count} values, found {}", v.len())));
        }
        Ok(v)
    }
}

pub fn read_dataset(text: &str) -> Result<TrajectoryBatch> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (_, header) = lines.next("header")?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.first() != Some(&DATA_VERSION) {
        return Err(Error::format(1, format!("unsupported data version `{}`", f.first().unwrap_or(&""))));
    }
    if f.len() != 7 {
        return Err(Error::format(1, "header must read `gnflow-data-v1 kind n d N samples seed`"));
    }
    let kind = f[1].parse().map_err(|e: Error| Error::format(1, e.to_string()))?;
    let num = |i: usize| -> Result<u64> {
        f[i].parse()
            .map_err(|_| Error::format(1, format!("bad header field `{}`", f[i])))
    };
    let (n, d, nt, count, seed) = (num(2)? as usize, num(3)? as usize, num(4)? as usize, num(5)? as usize, num(6)?);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let times = lines.numbers("times", nt)?;
        let initial = Tensor::matrix(n, d, lines.numbers("initial condition", n * d)?)?;
        let mut values = Vec::with_capacity(nt * n * d);
        for _ in 0..nt {
            values.extend(lines.numbers("values", n * d)?);
        }
        let mut mask = Vec::with_capacity(nt * n);
        for _ in 0..nt {
            let (no, line) = lines.next("mask")?;
            let bits = line.trim();
            if bits.len() != n || bits.chars().any(|c| c != '0' && c != '1') {
                return Err(Error::format(no, format!("mask must be {n} characters of 0/1")));
            }
            mask.extend(bits.chars().map(|c| c == '1'));
        }
        samples.push(Trajectory {
            times,
            initial,
            values: Tensor::matrix(nt * n, d, values)?,
            mask,
        });
    }
    let (no, marker) = lines.next("adjacency marker")?;
    if marker.trim() != "adjacency" {
        return Err(Error::format(no, "expected `adjacency`"));
    }
    let mut rows = Vec::with_capacity(n * n);
    for _ in 0..n {
        rows.extend(lines.numbers("adjacency row", n)?);
    }
    let batch = TrajectoryBatch {
        kind,
        n,
        d,
        num_times: nt,
        seed,
        adjacency: DagMatrix::new(Tensor::matrix(n, n, rows)?)?,
        samples,
    };
    batch.validate()?;
    Ok(batch)
}
