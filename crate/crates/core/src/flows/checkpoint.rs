//! Self-describing text checkpoints:
//!
//! ```text
//! gnflow-v1 <arch> <n> <d> <h>
//! config <key> <value>        (one line per configuration field)
//! tensor <name> <rows> <cols>
//! <rows lines of comma-separated values>
//! ```

use std::fmt::Write as _;

use gnflow_diffcore::Tensor;

use super::{FlowConfig, FlowModel};
use crate::error::{Error, Result};
use crate::graphs::dag::parse_csv_row;

pub const CHECKPOINT_VERSION: &str = "gnflow-v1";

/// Serializes the configuration and every parameter. `extra` key/value pairs
/// are stored as additional `config` lines and returned by the reader.
pub fn write_checkpoint(model: &FlowModel, extra: &[(String, String)]) -> String {
    let c = model.config();
    let mut s = format!(
        "{CHECKPOINT_VERSION} {} {} {} {}\n",
        c.arch, c.nodes, c.features, c.hidden
    );
    for (k, v) in c.to_pairs() {
        writeln!(s, "config {k} {v}").unwrap();
    }
    for (k, v) in extra {
        writeln!(s, "config {k} {v}").unwrap();
    }
    let store = model.store();
    for id in store.ids() {
        let t = store.get(id);
        let (rows, cols) = (t.rows(), t.cols());
        writeln!(s, "tensor {} {rows} {cols}", store.name(id)).unwrap();
        for r in 0..rows {
            let line: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
    }
    s
}

/// Rebuilds a model and returns it with the unrecognized `config` entries.
pub fn read_checkpoint(text: &str) -> Result<(FlowModel, Vec<(String, String)>)> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let (_, header) = lines.next().ok_or_else(|| Error::format(1, "empty checkpoint"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&CHECKPOINT_VERSION) {
        return Err(Error::format(1, format!("unsupported checkpoint version `{}`", fields.first().unwrap_or(&""))));
    }
    if fields.len() != 5 {
        return Err(Error::format(1, "header must read `gnflow-v1 <arch> <n> <d> <h>`"));
    }
    let mut config = FlowConfig::new(fields[1].parse()?, 1, 1);
    let mut extra = Vec::new();
    let mut tensors = Vec::new();
    while let Some((no, line)) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => continue,
            ["config", key, value] => {
                if !config.set(key, value)? {
                    extra.push((key.to_string(), value.to_string()));
                }
            }
            ["config", key] => extra.push((key.to_string(), String::new())),
            ["tensor", name, rows, cols] => {
                let rows: usize = rows.parse().map_err(|_| Error::format(no, "bad row count"))?;
                let cols: usize = cols.parse().map_err(|_| Error::format(no, "bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (no, l) = lines.next().ok_or_else(|| Error::format(no, "truncated tensor"))?;
                    let row = parse_csv_row(l, no)?;
                    if row.len() != cols {
                        return Err(Error::format(no, format!("expected {cols} values, found {}", row.len())));
                    }
                    data.extend(row);
                }
                tensors.push((no, name.to_string(), Tensor::matrix(rows, cols, data)?));
            }
            _ => return Err(Error::format(no, format!("unrecognized line `{line}`"))),
        }
    }
    let header_matches = config.nodes.to_string() == fields[2]
        && config.features.to_string() == fields[3]
        && config.hidden.to_string() == fields[4];
    if !header_matches {
        return Err(Error::format(1, "header disagrees with the config lines"));
    }
    let mut model = FlowModel::new(config, 0)?;
    let mut seen = vec![false; model.store().len()];
    for (no, name, t) in tensors {
        let id = model
            .store()
            .find(&name)
            .ok_or_else(|| Error::format(no, format!("unknown tensor `{name}`")))?;
        model
            .store_mut()
            .set(id, t)
            .map_err(|e| Error::format(no, e.to_string()))?;
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let id = model.store().ids().nth(missing).unwrap();
        return Err(Error::format(0, format!("missing tensor `{}`", model.store().name(id))));
    }
    Ok((model, extra))
}
