//! Engine configuration file and `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use remind_core::backends::config::RegistrySpec;
use remind_core::pipeline::PipelineOptions;
use remind_core::review::DEFAULT_HIGH_QUALITY_THRESHOLD;
use remind_core::sweep::SweepSpec;
use serde::{Deserialize, Serialize};

fn default_log_path() -> PathBuf {
    PathBuf::from("runs.jsonl")
}
fn default_report_dir() -> PathBuf {
    PathBuf::from("report")
}
fn default_jobs() -> usize {
    1
}
fn default_threshold() -> u8 {
    DEFAULT_HIGH_QUALITY_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_log_path")]
    pub log_path: PathBuf,
    #[serde(default = "default_report_dir")]
    pub report_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_threshold")]
    pub high_quality_threshold: u8,
    #[serde(default)]
    pub pipeline: PipelineOptions,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub registry: RegistrySpec,
}

impl Default for EngineConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

impl EngineConfig {
    /// Reads `path` (or starts from defaults) and applies `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: EngineConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        config.sweep.pipeline = config.pipeline;
        if config.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        Ok(config)
    }

    /// JSON form written into log headers.
    pub fn echo(&self, command: &str) -> serde_json::Value {
        serde_json::json!({
            "command": command,
            "prompt_version": remind_core::prompts::PROMPT_VERSION,
            "config": self,
        })
    }
}

/// Sets `a.b.c = value`; the value is parsed as TOML and falls back to a plain string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cursor = table;
    for p in parents {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not a table"))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = EngineConfig::default();
        assert_eq!(c.jobs, 1);
        assert_eq!(c.high_quality_threshold, 14);
        assert_eq!(c.sweep.word_limits, vec![75, 150, 300]);
        assert_eq!(c.pipeline.gate.threshold(), 4);
    }

    #[test]
    fn overrides_reach_nested_values() {
        let c = EngineConfig::load(
            None,
            &[
                "sweep.seeds=[0, 1]".into(),
                "pipeline.gate=5".into(),
                "pipeline.dream_context=prompt_only".into(),
                "log_path=out/x.jsonl".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.sweep.seeds, vec![0, 1]);
        assert_eq!(c.sweep.pipeline.gate.threshold(), 5);
        assert_eq!(c.log_path, PathBuf::from("out/x.jsonl"));
        assert!(EngineConfig::load(None, &["pipeline.gate=9".into()]).is_err());
        assert!(EngineConfig::load(None, &["nonsense".into()]).is_err());
        assert!(EngineConfig::load(None, &["unknown_key=1".into()]).is_err());
    }
}
