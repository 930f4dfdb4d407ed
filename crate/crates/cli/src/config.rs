//! Flat `key=value` run configuration.
//!
//! Keys are the long flag names of a subcommand. A file given with
//! `--config` is expanded into flags placed before the command-line flags,
//! so explicit flags win. Run manifests use the same format and can be fed
//! back in: `metric.*` lines are skipped and a `command` line must match
//! the subcommand being run.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use indexmap::IndexMap;
use serde::Serialize;

pub const COMMAND_KEY: &str = "command";
pub const METRIC_PREFIX: &str = "metric.";

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_pairs(text: &str) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got `{line}`", i + 1);
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("line {}: duplicate key `{key}`", i + 1);
        }
    }
    Ok(out)
}

/// Turns a config file into flags for `subcommand`.
pub fn file_flags(path: &Path, subcommand: &str) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let pairs = parse_pairs(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let mut flags = Vec::new();
    for (key, value) in pairs {
        if key.starts_with(METRIC_PREFIX) || key == "config" {
            continue;
        }
        if key == COMMAND_KEY {
            if value != subcommand {
                bail!("config {} was written for `{value}`, not `{subcommand}`", path.display());
            }
            continue;
        }
        match value.as_str() {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            _ => flags.push(format!("--{key}={value}")),
        }
    }
    Ok(flags)
}

/// Splices flags from a `--config` file, if any, in front of the explicit
/// flags of the subcommand.
pub fn expand_args(args: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let mut config = None;
    let mut iter = args.iter().enumerate().skip(1);
    while let Some((_, a)) = iter.next() {
        if a == "--config" {
            config = iter.next().map(|(_, v)| v.clone());
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        }
    }
    let Some(config) = config else {
        return Ok(args);
    };
    let Some(pos) = args.iter().skip(1).position(|a| subcommands.contains(&a.as_str())) else {
        return Ok(args);
    };
    let pos = pos + 1;
    let flags = file_flags(Path::new(&config), &args[pos])?;
    let mut out: Vec<String> = args[..=pos].to_vec();
    out.extend(flags);
    out.extend(args[pos + 1..].iter().cloned());
    Ok(out)
}

/// Flattens a serializable argument struct into `key=value` pairs with
/// kebab-case keys; `None` fields are left out.
pub fn to_pairs<S: Serialize>(args: &S) -> Result<Vec<(String, String)>> {
    let value = serde_json::to_value(args)?;
    let serde_json::Value::Object(map) = value else {
        bail!("arguments must serialize to an object");
    };
    let mut out = Vec::new();
    for (k, v) in map {
        let text = match v {
            serde_json::Value::Null => continue,
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        out.push((k.replace('_', "-"), text));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let p = parse_pairs("# c\nseed = 3\n\nout=x=y\n").unwrap();
        assert_eq!(p["seed"], "3");
        assert_eq!(p["out"], "x=y");
        assert!(parse_pairs("seed").is_err());
        assert!(parse_pairs("a=1\na=2").is_err());
    }

    #[test]
    fn explicit_flags_follow_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "command=generate\nseed=1\ngold=true\nquiet=false\nmetric.x=0.5\n").unwrap();
        let args: Vec<String> = ["rock", "generate", "--config", cfg.to_str().unwrap(), "--seed", "2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let out = expand_args(args, &["generate"]).unwrap();
        assert_eq!(&out[..4], ["rock", "generate", "--seed=1", "--gold"]);
        assert_eq!(out.last().unwrap(), "2");
    }

    #[test]
    fn command_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("m");
        fs::write(&cfg, "command=evaluate\n").unwrap();
        assert!(file_flags(&cfg, "generate").is_err());
    }
}
