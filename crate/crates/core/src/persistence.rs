//! Append-only JSONL run log.
//!
//! One JSON object per line. The first line of a log created by the engine is
//! a header object (`{"remind_log": ...}`) echoing the effective configuration;
//! every other line is a [`RunRecord`] in the flat row shape below. Column names
//! follow the published run tables so those tables load without any mapping.
//!
//! A crash can leave a partial final line. [`load`] reports and skips it;
//! [`RunLog::open`] truncates it before appending.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_record, Annotation, ConceptPair, DomainError, DreamContext, JudgeVerdict, ReviewScores,
    RunConfig, RunRecord, Stage, TemplateId, Violation,
};

pub const HEADER_KEY: &str = "remind_log";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("run id {0} already present in log")]
    DuplicateRunId(u64),
    #[error("record {run_id} fails validation: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid { run_id: u64, violations: Vec<Violation> },
    #[error("corrupt log {path} at line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("failed to encode record: {0}")]
    Encode(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Flat on-disk shape of a [`RunRecord`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub id: u64,
    pub pair_id: String,
    pub x: String,
    pub y: String,
    pub template: u8,
    pub word: u32,
    pub temperature: f64,
    pub seed: u64,
    #[serde(default = "default_wake_temperature")]
    pub wake_temperature: f64,
    #[serde(default)]
    pub judge_temperature: f64,
    #[serde(default)]
    pub similarity: Option<f64>,
    #[serde(default)]
    pub alignment: Option<i64>,
    #[serde(default)]
    pub coherence: Option<i64>,
    #[serde(default)]
    pub novelty: Option<i64>,
    #[serde(default)]
    pub sum: Option<i64>,
    #[serde(default)]
    pub rewake_out: Option<String>,
    #[serde(default)]
    pub wake_out: Option<String>,
    #[serde(default)]
    pub idea_wake: Option<String>,
    #[serde(default)]
    pub dream_out: Option<String>,
    #[serde(default)]
    pub idea_dream: Option<String>,
    #[serde(default)]
    pub consistency: Option<i64>,
    #[serde(default)]
    pub judge_raw: Option<String>,
    #[serde(default)]
    pub gated: bool,
    #[serde(default = "default_gate_threshold")]
    pub gate_threshold: u8,
    #[serde(default)]
    pub prompt_version: String,
    #[serde(default)]
    pub dream_context: DreamContext,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub failed_stage: Option<Stage>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
}

fn default_wake_temperature() -> f64 {
    crate::domain::DEFAULT_WAKE_TEMPERATURE
}

fn default_gate_threshold() -> u8 {
    4
}

impl From<RunRecord> for RunRow {
    fn from(r: RunRecord) -> Self {
        let (consistency, judge_raw) = match r.judge {
            Some(v) => (Some(i64::from(v.consistency)), Some(v.raw)),
            None => (None, None),
        };
        let review = r.review;
        RunRow {
            id: r.config.run_id,
            pair_id: r.config.pair.pair_id,
            x: r.config.pair.x,
            y: r.config.pair.y,
            template: r.config.template.get(),
            word: r.config.word_limit,
            temperature: r.config.dream_temperature,
            seed: r.config.seed,
            wake_temperature: r.config.wake_temperature,
            judge_temperature: r.config.judge_temperature,
            similarity: r.similarity,
            alignment: review.map(|s| i64::from(s.alignment)),
            coherence: review.map(|s| i64::from(s.coherence)),
            novelty: review.map(|s| i64::from(s.novelty)),
            sum: review.map(|s| i64::from(s.sum)),
            rewake_out: r.rewake_out,
            wake_out: r.wake_out,
            idea_wake: r.idea_wake,
            dream_out: r.dream_out,
            idea_dream: r.idea_dream,
            consistency,
            judge_raw,
            gated: r.gated,
            gate_threshold: r.gate_threshold,
            prompt_version: r.prompt_version,
            dream_context: r.dream_context,
            config_hash: r.config_hash,
            failed_stage: r.failed_stage,
            annotations: r.annotations,
            started_at: r.started_at,
            finished_at: r.finished_at,
        }
    }
}

impl TryFrom<RunRow> for RunRecord {
    type Error = DomainError;

    fn try_from(row: RunRow) -> Result<Self, Self::Error> {
        let config = RunConfig {
            run_id: row.id,
            pair: ConceptPair::new(row.pair_id, row.x, row.y)?,
            template: TemplateId::try_from(row.template)?,
            word_limit: row.word,
            dream_temperature: row.temperature,
            seed: row.seed,
            wake_temperature: row.wake_temperature,
            judge_temperature: row.judge_temperature,
        };
        config.validate()?;
        let judge = row
            .consistency
            .map(|c| JudgeVerdict::new(c, row.idea_dream.clone(), row.judge_raw.unwrap_or_default()))
            .transpose()?;
        let review = match (row.alignment, row.coherence, row.novelty) {
            (Some(a), Some(c), Some(n)) => Some(match row.sum {
                Some(s) => ReviewScores::with_sum(a, c, n, s)?,
                None => ReviewScores::new(a, c, n)?,
            }),
            (None, None, None) => None,
            _ => {
                return Err(DomainError::InvalidParameter(
                    "review scores must be all present or all absent".into(),
                ))
            }
        };
        Ok(RunRecord {
            config,
            prompt_version: row.prompt_version,
            dream_context: row.dream_context,
            gate_threshold: row.gate_threshold,
            config_hash: row.config_hash,
            wake_out: row.wake_out,
            idea_wake: row.idea_wake,
            dream_out: row.dream_out,
            idea_dream: row.idea_dream,
            judge,
            gated: row.gated,
            rewake_out: row.rewake_out,
            similarity: row.similarity,
            review,
            failed_stage: row.failed_stage,
            annotations: row.annotations,
            started_at: row.started_at,
            finished_at: row.finished_at,
        })
    }
}

/// Result of reading a log file.
#[derive(Debug, Default)]
pub struct Loaded {
    pub header: Option<serde_json::Value>,
    pub records: Vec<RunRecord>,
    pub warnings: Vec<String>,
    /// Byte length of the well-formed prefix.
    valid_len: u64,
}

/// Reads every record from `path`.
pub fn load(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, LogError> {
    let loaded = load_full(path)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded.records)
}

/// Like [`load`] but also returns the header line and any recovery warnings.
pub fn load_full(path: impl AsRef<Path>) -> Result<Loaded, LogError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut out = Loaded::default();
    let mut buf = Vec::new();
    let mut offset = 0u64;
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let terminated = buf.last() == Some(&b'\n');
        let parsed = parse_line(&buf);
        match parsed {
            Ok(Line::Blank) => {}
            Ok(Line::Header(h)) => {
                if line_no == 1 {
                    out.header = Some(h);
                } else {
                    return Err(LogError::Corrupt {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: "header line after the first line".into(),
                    });
                }
            }
            Ok(Line::Record(r)) => out.records.push(*r),
            Err(message) if !terminated => {
                out.warnings.push(format!(
                    "{}: skipping partial trailing line {line_no} ({n} bytes): {message}",
                    path.display()
                ));
                break;
            }
            Err(message) => {
                return Err(LogError::Corrupt {
                    path: path.to_path_buf(),
                    line: line_no,
                    message,
                })
            }
        }
        offset += n as u64;
        out.valid_len = offset;
    }
    Ok(out)
}

enum Line {
    Blank,
    Header(serde_json::Value),
    Record(Box<RunRecord>),
}

fn parse_line(bytes: &[u8]) -> Result<Line, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
    let text = text.trim();
    if text.is_empty() {
        return Ok(Line::Blank);
    }
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if let Some(header) = value.get(HEADER_KEY) {
        return Ok(Line::Header(header.clone()));
    }
    let record: RunRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
    Ok(Line::Record(Box::new(record)))
}

/// Writable handle on a run log. Single writer; appends are one `write` per line.
#[derive(Debug)]
pub struct RunLog {
    path: PathBuf,
    file: File,
    header: Option<serde_json::Value>,
    index: BTreeMap<u64, RunRecord>,
}

impl RunLog {
    /// Opens `path` for appending, creating it with `header` if missing.
    ///
    /// An existing log keeps its original header. A partial trailing line left
    /// by a crash is cut off so the next append starts on a clean line.
    pub fn open(path: impl AsRef<Path>, header: Option<&serde_json::Value>) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let exists = path.exists();
        let (loaded, needs_newline) = if exists {
            let loaded = load_full(&path)?;
            for w in &loaded.warnings {
                log::warn!("{w}");
            }
            let len = fs::metadata(&path).map_err(io_err(&path))?.len();
            if len != loaded.valid_len {
                let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
                f.set_len(loaded.valid_len).map_err(io_err(&path))?;
                f.sync_all().map_err(io_err(&path))?;
            }
            let needs_newline = loaded.valid_len > 0 && !ends_with_newline(&path)?;
            (loaded, needs_newline)
        } else {
            (Loaded::default(), false)
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if needs_newline {
            file.write_all(b"\n").map_err(io_err(&path))?;
        }
        let mut header_out = loaded.header;
        if !exists {
            if let Some(h) = header {
                let line = serde_json::to_string(&serde_json::json!({ HEADER_KEY: h }))?;
                write_line(&mut file, &path, &line)?;
                header_out = Some(h.clone());
            }
        }
        let index = loaded.records.into_iter().map(|r| (r.run_id(), r)).collect();
        Ok(Self {
            path,
            file,
            header: header_out,
            index,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> Option<&serde_json::Value> {
        self.header.as_ref()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, run_id: u64) -> Option<&RunRecord> {
        self.index.get(&run_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.index.values()
    }

    /// Appends one validated record as a single line and syncs it to disk.
    pub fn append(&mut self, record: &RunRecord) -> Result<(), LogError> {
        let violations = validate_record(record);
        if !violations.is_empty() {
            return Err(LogError::Invalid {
                run_id: record.run_id(),
                violations,
            });
        }
        if self.index.contains_key(&record.run_id()) {
            return Err(LogError::DuplicateRunId(record.run_id()));
        }
        let line = serde_json::to_string(record)?;
        write_line(&mut self.file, &self.path, &line)?;
        self.index.insert(record.run_id(), record.clone());
        Ok(())
    }

    /// Rewrites the log keeping only records for which `keep` is true.
    ///
    /// Writes to a sibling temp file and renames it over the original, so a
    /// crash leaves either the old or the new log.
    pub fn retain(&mut self, mut keep: impl FnMut(&RunRecord) -> bool) -> Result<usize, LogError> {
        let dropped: Vec<u64> = self
            .index
            .values()
            .filter(|r| !keep(r))
            .map(RunRecord::run_id)
            .collect();
        if dropped.is_empty() {
            return Ok(0);
        }
        for id in &dropped {
            self.index.remove(id);
        }
        let records: Vec<&RunRecord> = self.index.values().collect();
        write_log_atomic(&self.path, self.header.as_ref(), records)?;
        self.file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        Ok(dropped.len())
    }
}

fn ends_with_newline(path: &Path) -> Result<bool, LogError> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path).map_err(io_err(path))?;
    let len = f.metadata().map_err(io_err(path))?.len();
    if len == 0 {
        return Ok(true);
    }
    f.seek(SeekFrom::End(-1)).map_err(io_err(path))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last).map_err(io_err(path))?;
    Ok(last[0] == b'\n')
}

fn write_line(file: &mut File, path: &Path, line: &str) -> Result<(), LogError> {
    let mut bytes = Vec::with_capacity(line.len() + 1);
    bytes.extend_from_slice(line.as_bytes());
    bytes.push(b'\n');
    file.write_all(&bytes).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

/// Writes a complete log (header plus records) to `path` via temp file and rename.
///
/// Used for derived logs (analyzed, reviewed) so the source log is never touched.
pub fn write_log_atomic<'a>(
    path: &Path,
    header: Option<&serde_json::Value>,
    records: impl IntoIterator<Item = &'a RunRecord>,
) -> Result<(), LogError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    {
        let w = tmp.as_file_mut();
        if let Some(h) = header {
            let line = serde_json::to_string(&serde_json::json!({ HEADER_KEY: h }))?;
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        for r in records {
            writeln!(w, "{}", serde_json::to_string(r)?).map_err(io_err(path))?;
        }
        w.sync_all().map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| LogError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// The eleven reference runs transcribed from the published tables.
pub const REFERENCE_RUNS: &str = include_str!("../fixtures/reference_runs.jsonl");

/// Parses [`REFERENCE_RUNS`].
pub fn reference_runs() -> Vec<RunRecord> {
    REFERENCE_RUNS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled fixture is well-formed"))
        .collect()
}
