//! Run manifests, written before any training starts and rewritten when the
//! run ends:
//!
//! ```text
//! gnflow-manifest-v1
//! command = train
//! ...run fields...
//! [config]
//! ...ExperimentConfig as key = value...
//! ```

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gnflow_core::flows::Architecture;
use gnflow_core::training::ExperimentConfig;

use crate::error::{CliError, CliResult};

pub const MANIFEST_VERSION: &str = "gnflow-manifest-v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub data: PathBuf,
    pub output: PathBuf,
    /// Unix seconds.
    pub started: f64,
    pub finished: Option<f64>,
    /// `running` until the run ends, then `ok` or the failure message.
    pub status: String,
    pub config: ExperimentConfig,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, data: &Path, output: &Path, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.model_seed,
            data: data.to_path_buf(),
            output: output.to_path_buf(),
            started: unix_now(),
            finished: None,
            status: "running".to_string(),
            config: config.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_VERSION}\n");
        let mut field = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        field("command", self.command.clone());
        field("version", self.version.clone());
        field("seed", self.seed.to_string());
        field("data", self.data.display().to_string());
        field("output", self.output.display().to_string());
        field("started", self.started.to_string());
        if let Some(f) = self.finished {
            field("finished", f.to_string());
            field("seconds", (f - self.started).to_string());
        }
        // Newlines would break the line format.
        field("status", self.status.replace('\n', " "));
        s.push_str("[config]\n");
        s.push_str(&self.config.to_text());
        s
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let bad = |m: String| CliError::Data(format!("manifest: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_VERSION) {
            return Err(bad(format!("expected `{MANIFEST_VERSION}` header")));
        }
        let mut fields = Vec::new();
        let mut config_lines = Vec::new();
        let mut in_config = false;
        for line in lines {
            if line == "[config]" {
                in_config = true;
            } else if in_config {
                config_lines.push(line);
            } else if let Some((k, v)) = line.split_once(" = ") {
                fields.push((k.to_string(), v.to_string()));
            } else {
                return Err(bad(format!("unreadable line `{line}`")));
            }
        }
        let get = |k: &str| {
            fields
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| bad(format!("missing `{k}`")))
        };
        let num = |k: &str| get(k)?.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));

        let config_text = config_lines.join("\n");
        let lookup = |key: &str| {
            config_lines
                .iter()
                .filter_map(|l| l.split_once(" = "))
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.to_string())
                .ok_or_else(|| bad(format!("config lacks `{key}`")))
        };
        let arch: Architecture = lookup("arch")?.parse().map_err(|e| bad(format!("{e}")))?;
        let nodes: usize = lookup("nodes")?.parse().map_err(|e| bad(format!("nodes: {e}")))?;
        let features: usize = lookup("features")?.parse().map_err(|e| bad(format!("features: {e}")))?;
        let mut config = ExperimentConfig::new(arch, nodes, features);
        config.apply_text(&config_text).map_err(|e| bad(e.to_string()))?;

        Ok(Self {
            command: get("command")?,
            version: get("version")?,
            seed: get("seed")?.parse().map_err(|e| bad(format!("seed: {e}")))?,
            data: get("data")?.into(),
            output: get("output")?.into(),
            started: num("started")?,
            finished: if fields.iter().any(|(k, _)| k == "finished") { Some(num("finished")?) } else { None },
            status: get("status")?,
            config,
        })
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))
    }

    /// Records the outcome and rewrites the file.
    pub fn finish(&mut self, dir: &Path, status: &str) -> CliResult<()> {
        self.finished = Some(unix_now());
        self.status = status.to_string();
        self.write(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_with_config() {
        let mut config = ExperimentConfig::new(Architecture::Gru, 4, 2).with_seed(9);
        config.train.adam.lr = 0.0123;
        config.adjacency_init = 1.0 / 3.0;
        let mut m = RunManifest::start("train", Path::new("d.txt"), Path::new("out"), &config);
        assert_eq!(RunManifest::from_text(&m.to_text()).unwrap(), m);
        m.finished = Some(m.started + 2.5);
        m.status = "ok".into();
        assert_eq!(RunManifest::from_text(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn rejects_unknown_version() {
        assert!(RunManifest::from_text("gnflow-manifest-v9\n").is_err());
    }
}
