//! Exhaustive parameter grid with resumable, append-only execution.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendRegistry;
use crate::domain::{ConceptPair, DomainError, RunConfig, TemplateId, DEFAULT_JUDGE_TEMPERATURE, DEFAULT_WAKE_TEMPERATURE};
use crate::persistence::{LogError, RunLog};
use crate::pipeline::{config_hash, execute_run, PipelineOptions};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep dimension `{0}` is empty")]
    EmptyDimension(&'static str),
    #[error("sweep dimension `{0}` lists a value twice")]
    DuplicateValue(&'static str),
    #[error("run id {0} would be assigned twice; adjust the id bases")]
    RunIdCollision(u64),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Log(#[from] LogError),
}

fn default_templates() -> Vec<u8> {
    vec![1, 2, 3]
}
fn default_word_limits() -> Vec<u32> {
    vec![75, 150, 300]
}
fn default_temperatures() -> Vec<f64> {
    vec![1.0, 3.0, 10.0]
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_wake_temperature() -> f64 {
    DEFAULT_WAKE_TEMPERATURE
}
fn default_id_base() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub pairs: Vec<ConceptPair>,
    #[serde(default = "default_templates")]
    pub templates: Vec<u8>,
    #[serde(default = "default_word_limits")]
    pub word_limits: Vec<u32>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_wake_temperature")]
    pub wake_temperature: f64,
    #[serde(default)]
    pub judge_temperature: f64,
    /// First run id when no per-pair base applies; ids then continue across pairs.
    #[serde(default = "default_id_base")]
    pub id_base: u64,
    /// Optional first run id per pair_id.
    #[serde(default)]
    pub pair_id_bases: BTreeMap<String, u64>,
    /// Set by the caller; engine configs keep these options in their own section.
    #[serde(skip)]
    pub pipeline: PipelineOptions,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            pairs: Vec::new(),
            templates: default_templates(),
            word_limits: default_word_limits(),
            temperatures: default_temperatures(),
            seeds: default_seeds(),
            wake_temperature: DEFAULT_WAKE_TEMPERATURE,
            judge_temperature: DEFAULT_JUDGE_TEMPERATURE,
            id_base: default_id_base(),
            pair_id_bases: BTreeMap::new(),
            pipeline: PipelineOptions::default(),
        }
    }
}

fn check_set<T: Copy>(name: &'static str, values: &[T], key: impl Fn(T) -> u64) -> Result<(), SweepError> {
    if values.is_empty() {
        return Err(SweepError::EmptyDimension(name));
    }
    let mut seen = HashSet::new();
    if values.iter().all(|&v| seen.insert(key(v))) {
        Ok(())
    } else {
        Err(SweepError::DuplicateValue(name))
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.pairs.is_empty() {
            return Err(SweepError::EmptyDimension("pairs"));
        }
        let mut ids = HashSet::new();
        for p in &self.pairs {
            p.validate()?;
            if !ids.insert(p.pair_id.as_str()) {
                return Err(SweepError::DuplicateValue("pairs"));
            }
        }
        check_set("templates", &self.templates, u64::from)?;
        for &t in &self.templates {
            TemplateId::try_from(t)?;
        }
        check_set("word_limits", &self.word_limits, u64::from)?;
        check_set("temperatures", &self.temperatures, f64::to_bits)?;
        check_set("seeds", &self.seeds, |s| s)?;
        Ok(())
    }

    /// Number of configs per pair.
    pub fn grid_size(&self) -> usize {
        self.templates.len() * self.word_limits.len() * self.temperatures.len() * self.seeds.len()
    }
}

/// Cartesian product in pair, template, word limit, temperature, seed order.
pub fn enumerate_configs(spec: &SweepSpec) -> Result<Vec<RunConfig>, SweepError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.pairs.len() * spec.grid_size());
    let mut used = BTreeSet::new();
    let mut next_global = spec.id_base;
    for pair in &spec.pairs {
        let mut next = spec.pair_id_bases.get(&pair.pair_id).copied().unwrap_or(next_global);
        for &template in &spec.templates {
            for &word_limit in &spec.word_limits {
                for &temperature in &spec.temperatures {
                    for &seed in &spec.seeds {
                        if !used.insert(next) {
                            return Err(SweepError::RunIdCollision(next));
                        }
                        let mut config =
                            RunConfig::new(next, pair.clone(), TemplateId::try_from(template)?, word_limit, temperature, seed)?;
                        config.wake_temperature = spec.wake_temperature;
                        config.judge_temperature = spec.judge_temperature;
                        config.validate()?;
                        out.push(config);
                        next += 1;
                    }
                }
            }
        }
        next_global = next_global.max(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOptions {
    pub jobs: usize,
    pub retry_failed: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            retry_failed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Runs executed by this invocation that finished every stage.
    pub completed: usize,
    /// Runs executed by this invocation that stopped at a stage failure.
    pub failed: usize,
    /// Runs already present in the log and left untouched.
    pub skipped: usize,
}

/// Executes every config of `spec` missing from `log`.
///
/// A logged run is reused when its config hash matches. Records with a
/// different hash are stale and re-executed; failed records are re-executed
/// only with `retry_failed`. Stale and retried records are dropped from the
/// log (atomic rewrite) before their replacements are appended.
pub fn execute_sweep(
    spec: &SweepSpec,
    registry: &BackendRegistry,
    log: &mut RunLog,
    options: SweepOptions,
) -> Result<SweepSummary, SweepError> {
    let configs = enumerate_configs(spec)?;
    let mut summary = SweepSummary::default();
    let mut pending = Vec::new();
    let mut replace = HashSet::new();
    for config in configs {
        let hash = config_hash(&config, &spec.pipeline);
        match log.get(config.run_id) {
            Some(existing) if existing.config_hash.as_deref() != Some(hash.as_str()) => {
                log::warn!("run {} is stale (config changed); re-executing", config.run_id);
                replace.insert(config.run_id);
                pending.push(config);
            }
            Some(existing) if existing.is_failed() && options.retry_failed => {
                replace.insert(config.run_id);
                pending.push(config);
            }
            Some(_) => summary.skipped += 1,
            None => pending.push(config),
        }
    }
    if !replace.is_empty() {
        log.retain(|r| !replace.contains(&r.run_id()))?;
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel();
    let mut write_error = None;
    thread::scope(|s| {
        for _ in 0..options.jobs.clamp(1, pending.len().max(1)) {
            let tx = tx.clone();
            let (pending, next, stop) = (&pending, &next, &stop);
            s.spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let Some(config) = pending.get(next.fetch_add(1, Ordering::SeqCst)) else { break };
                    if tx.send(execute_run(registry, config, &spec.pipeline)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for record in rx {
            if write_error.is_some() {
                continue;
            }
            match log.append(&record) {
                Ok(()) if record.is_failed() => summary.failed += 1,
                Ok(()) => summary.completed += 1,
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    write_error = Some(e);
                }
            }
        }
    });
    match write_error {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}
