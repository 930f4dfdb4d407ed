//! Run manifests: the effective configuration of one command plus the
//! metrics it produced, written next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use indexmap::IndexMap;

use crate::config::{parse_pairs, COMMAND_KEY, METRIC_PREFIX};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub metrics: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, config: Vec<(String, String)>) -> Self {
        Self {
            command: command.to_string(),
            config,
            metrics: Vec::new(),
        }
    }

    /// Floats are written in shortest round-trip form so reruns compare
    /// bit for bit.
    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.push((key.to_string(), format!("{value:?}")));
    }

    pub fn count(&mut self, key: &str, value: usize) {
        self.metrics.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# rock run manifest\n{COMMAND_KEY}={}\n", self.command);
        for (k, v) in &self.config {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.metrics {
            out.push_str(&format!("{METRIC_PREFIX}{k}={v}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = manifest_path(dir, &self.command);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.manifest"))
}

/// The `metric.*` entries of a manifest, prefix stripped.
pub fn read_metrics(path: &Path) -> Result<IndexMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_pairs(&text)?
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(METRIC_PREFIX).map(|m| (m.to_string(), v)))
        .collect())
}
