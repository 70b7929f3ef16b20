use std::path::Path;

use gnflow_core::dynamics::{read_dataset, TrajectoryBatch};
use gnflow_core::flows::Architecture;
use gnflow_core::training::{ExperimentConfig, GraphMode};

use crate::args::TrainFlags;
use crate::error::{CliError, CliResult};
use crate::manifest::{RunManifest, MANIFEST_VERSION};

pub const SEED_ENV: &str = "GNFLOW_SEED";
pub const METRICS_VERSION: &str = "gnflow-metrics-v1";

pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn load_data(path: &Path) -> CliResult<TrajectoryBatch> {
    let batch = read_dataset(&read_text(path)?).map_err(|e| CliError::data(path.display(), e))?;
    batch.validate().map_err(|e| CliError::data(path.display(), e))?;
    Ok(batch)
}

/// A config file, or a run manifest whose configuration section is reused.
fn config_file_text(path: &Path) -> CliResult<String> {
    let text = read_text(path)?;
    if text.lines().next() == Some(MANIFEST_VERSION) {
        return Ok(RunManifest::from_text(&text)?.config.to_text());
    }
    Ok(text)
}

fn parse_sets(sets: &[String]) -> CliResult<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect()
}

/// Resolves the experiment configuration for `data`.
///
/// The architecture is fixed first (flag, then `--set arch`, then the config
/// file) because it chooses architecture-specific defaults.
pub fn build_config(flags: &TrainFlags, data: &TrajectoryBatch, graph: Option<GraphMode>) -> CliResult<ExperimentConfig> {
    let file = match &flags.config {
        Some(p) => Some((p, config_file_text(p)?)),
        None => None,
    };
    let in_file = |p: &Path, e: gnflow_core::Error| CliError::Usage(format!("{}: {e}", p.display()));
    let sets = parse_sets(&flags.set)?;

    let arch = if let Some(a) = flags.arch {
        a.into()
    } else if let Some((_, v)) = sets.iter().find(|(k, _)| k == "arch") {
        v.parse::<Architecture>()?
    } else if let Some((p, text)) = &file {
        let mut probe = ExperimentConfig::for_data(Architecture::Resnet, data);
        probe.apply_text(text).map_err(|e| in_file(p, e))?;
        probe.flow.arch
    } else {
        Architecture::Resnet
    };

    let mut c = ExperimentConfig::for_data(arch, data).with_seed(env_seed()?.unwrap_or(0));
    if let Some((p, text)) = &file {
        c.apply_text(text).map_err(|e| in_file(p, e))?;
    }
    for (k, v) in &sets {
        if !c.set(k, v)? {
            return Err(CliError::Usage(format!("unknown setting `{k}`")));
        }
    }
    if let Some(s) = flags.seed {
        c = c.with_seed(s);
    }
    if let Some(v) = flags.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = flags.patience {
        c.train.patience = v;
    }
    if let Some(v) = flags.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = flags.lr {
        c.train.adam.lr = v;
    }
    if let Some(v) = flags.hidden {
        c.flow.hidden = v;
    }
    if let Some(v) = flags.blocks {
        c.flow.blocks = v;
    }
    if let Some(v) = flags.max_outer {
        c.train.al.max_outer = v;
    }
    if let Some(g) = graph {
        c.graph = g;
    }
    if c.flow.nodes != data.n || c.flow.features != data.d {
        return Err(CliError::Usage(format!(
            "configuration expects {} nodes × {} features, data has {} × {}",
            c.flow.nodes, c.flow.features, data.n, data.d
        )));
    }
    c.validate()?;
    Ok(c)
}

/// Versioned `key = value` metrics file.
pub fn metrics_text(pairs: &[(&str, String)]) -> String {
    let mut s = format!("{METRICS_VERSION}\n");
    for (k, v) in pairs {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}
