//! Shared vocabulary: run parameters, stage outputs, verdicts, review scores
//! and the persisted run record.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("concept labels must be non-empty")]
    EmptyConcept,
    #[error("concept labels must differ (both are {0:?})")]
    IdenticalConcepts(String),
    #[error("pair id must be non-empty")]
    EmptyPairId,
    #[error("template id {0} is not one of 1, 2, 3")]
    UnknownTemplate(u8),
    #[error("invalid run parameter: {0}")]
    InvalidParameter(String),
    #[error("score {name}={value} outside 1..=5")]
    ScoreOutOfRange { name: &'static str, value: i64 },
    #[error("stored sum {stored} does not equal {computed}")]
    SumMismatch { stored: i64, computed: i64 },
}

/// Two concepts whose relationship a run explores.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptPair {
    pub pair_id: String,
    pub x: String,
    pub y: String,
}

impl ConceptPair {
    pub fn new(
        pair_id: impl Into<String>,
        x: impl Into<String>,
        y: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let pair = Self {
            pair_id: pair_id.into(),
            x: x.into(),
            y: y.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.pair_id.trim().is_empty() {
            return Err(DomainError::EmptyPairId);
        }
        if self.x.trim().is_empty() || self.y.trim().is_empty() {
            return Err(DomainError::EmptyConcept);
        }
        if self.x.trim() == self.y.trim() {
            return Err(DomainError::IdenticalConcepts(self.x.clone()));
        }
        Ok(())
    }
}

/// Ideation template index, always 1, 2 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TemplateId(u8);

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [TemplateId(1), TemplateId(2), TemplateId(3)];

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for TemplateId {
    type Error = DomainError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            1..=3 => Ok(TemplateId(value)),
            other => Err(DomainError::UnknownTemplate(other)),
        }
    }
}

impl From<TemplateId> for u8 {
    fn from(id: TemplateId) -> u8 {
        id.0
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const DEFAULT_WAKE_TEMPERATURE: f64 = 0.6;
pub const DEFAULT_JUDGE_TEMPERATURE: f64 = 0.0;

/// Full parameterization of a single pipeline execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: u64,
    pub pair: ConceptPair,
    pub template: TemplateId,
    /// Requested output length in words. Only ever stated in the prompt.
    pub word_limit: u32,
    pub dream_temperature: f64,
    pub seed: u64,
    pub wake_temperature: f64,
    pub judge_temperature: f64,
}

impl RunConfig {
    pub fn new(
        run_id: u64,
        pair: ConceptPair,
        template: TemplateId,
        word_limit: u32,
        dream_temperature: f64,
        seed: u64,
    ) -> Result<Self, DomainError> {
        let config = Self {
            run_id,
            pair,
            template,
            word_limit,
            dream_temperature,
            seed,
            wake_temperature: DEFAULT_WAKE_TEMPERATURE,
            judge_temperature: DEFAULT_JUDGE_TEMPERATURE,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        self.pair.validate()?;
        if self.word_limit == 0 {
            return Err(DomainError::InvalidParameter("word_limit must be positive".into()));
        }
        if !(self.dream_temperature.is_finite() && self.dream_temperature > 0.0) {
            return Err(DomainError::InvalidParameter(format!(
                "dream temperature must be positive, got {}",
                self.dream_temperature
            )));
        }
        for (name, t) in [
            ("wake temperature", self.wake_temperature),
            ("judge temperature", self.judge_temperature),
        ] {
            if !(t.is_finite() && t >= 0.0) {
                return Err(DomainError::InvalidParameter(format!(
                    "{name} must be non-negative, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// How the dream stage sees the wake output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DreamContext {
    /// Ideation prompt followed by a delimited block holding `wake_out`.
    #[default]
    WithWake,
    /// Same ideation prompt as wake, nothing else.
    PromptOnly,
}

impl fmt::Display for DreamContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DreamContext::WithWake => "with_wake",
            DreamContext::PromptOnly => "prompt_only",
        })
    }
}

/// Where in a run something happened. Used for stage outputs and failure annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Wake,
    IdeaWake,
    Dream,
    Judge,
    Rewake,
    Similarity,
    Review,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Wake => "wake",
            Stage::IdeaWake => "idea_wake",
            Stage::Dream => "dream",
            Stage::Judge => "judge",
            Stage::Rewake => "rewake",
            Stage::Similarity => "similarity",
            Stage::Review => "review",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutput {
    pub stage: Stage,
    pub text: String,
    pub idea: Option<String>,
}

/// Parsed judge reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub consistency: u8,
    pub idea: Option<String>,
    /// Verbatim reply the verdict was parsed from.
    pub raw: String,
}

impl JudgeVerdict {
    pub fn new(consistency: i64, idea: Option<String>, raw: impl Into<String>) -> Result<Self, DomainError> {
        let consistency = check_score("consistency", consistency)?;
        let idea = idea.filter(|s| !s.trim().is_empty());
        Ok(Self {
            consistency,
            idea,
            raw: raw.into(),
        })
    }
}

fn check_score(name: &'static str, value: i64) -> Result<u8, DomainError> {
    if (1..=5).contains(&value) {
        Ok(value as u8)
    } else {
        Err(DomainError::ScoreOutOfRange { name, value })
    }
}

/// External review of a final output. `sum` is always derived from the three components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawScores")]
pub struct ReviewScores {
    pub alignment: u8,
    pub coherence: u8,
    pub novelty: u8,
    pub sum: u8,
}

#[derive(Deserialize)]
struct RawScores {
    alignment: i64,
    coherence: i64,
    novelty: i64,
    sum: Option<i64>,
}

impl TryFrom<RawScores> for ReviewScores {
    type Error = DomainError;

    fn try_from(raw: RawScores) -> Result<Self, Self::Error> {
        let scores = ReviewScores::new(raw.alignment, raw.coherence, raw.novelty)?;
        match raw.sum {
            Some(stored) if stored != i64::from(scores.sum) => Err(DomainError::SumMismatch {
                stored,
                computed: i64::from(scores.sum),
            }),
            _ => Ok(scores),
        }
    }
}

impl ReviewScores {
    pub fn new(alignment: i64, coherence: i64, novelty: i64) -> Result<Self, DomainError> {
        let alignment = check_score("alignment", alignment)?;
        let coherence = check_score("coherence", coherence)?;
        let novelty = check_score("novelty", novelty)?;
        Ok(Self {
            alignment,
            coherence,
            novelty,
            sum: alignment + coherence + novelty,
        })
    }

    /// Builds scores from components plus a claimed sum, rejecting a sum that disagrees.
    pub fn with_sum(alignment: i64, coherence: i64, novelty: i64, sum: i64) -> Result<Self, DomainError> {
        RawScores {
            alignment,
            coherence,
            novelty,
            sum: Some(sum),
        }
        .try_into()
    }
}

/// Non-fatal or fatal problem attached to a record at a given stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub stage: Stage,
    pub message: String,
}

/// Persisted outcome of one run.
///
/// Serializes to the flat JSONL row defined in [`crate::persistence::RunRow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::persistence::RunRow", try_from = "crate::persistence::RunRow")]
pub struct RunRecord {
    pub config: RunConfig,
    pub prompt_version: String,
    pub dream_context: DreamContext,
    pub gate_threshold: u8,
    /// Hash of everything that determines the run's requests. Absent on imported rows.
    pub config_hash: Option<String>,
    pub wake_out: Option<String>,
    pub idea_wake: Option<String>,
    pub dream_out: Option<String>,
    pub idea_dream: Option<String>,
    pub judge: Option<JudgeVerdict>,
    pub gated: bool,
    pub rewake_out: Option<String>,
    pub similarity: Option<f64>,
    pub review: Option<ReviewScores>,
    /// Stage at which the pipeline stopped, if it did not finish.
    pub failed_stage: Option<Stage>,
    pub annotations: Vec<Annotation>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl RunRecord {
    /// Empty record for `config`, before any stage has run.
    pub fn pending(config: RunConfig, prompt_version: &str, dream_context: DreamContext, gate_threshold: u8) -> Self {
        Self {
            config,
            prompt_version: prompt_version.to_string(),
            dream_context,
            gate_threshold,
            config_hash: None,
            wake_out: None,
            idea_wake: None,
            dream_out: None,
            idea_dream: None,
            judge: None,
            gated: false,
            rewake_out: None,
            similarity: None,
            review: None,
            failed_stage: None,
            annotations: Vec::new(),
            started_at: None,
            finished_at: None,
        }
    }

    pub fn run_id(&self) -> u64 {
        self.config.run_id
    }

    pub fn annotate(&mut self, stage: Stage, message: impl Into<String>) {
        self.annotations.push(Annotation {
            stage,
            message: message.into(),
        });
    }

    pub fn fail(&mut self, stage: Stage, message: impl Into<String>) {
        self.failed_stage = Some(stage);
        self.annotate(stage, message);
    }

    pub fn is_failed(&self) -> bool {
        self.failed_stage.is_some()
    }
}

/// A broken record invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Config(DomainError),
    GateThreshold(u8),
    EmptyText(Stage),
    ConsistencyOutOfRange(u8),
    IdeaMismatch,
    GateInconsistency,
    RewakeWithoutGate,
    MissingRewake,
    SimilarityWithoutIdeas,
    MissingSimilarity,
    SimilarityOutOfRange(f64),
    ScoreOutOfRange,
    SumMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Config(e) => write!(f, "invalid config: {e}"),
            Violation::GateThreshold(t) => write!(f, "gate threshold {t} outside 1..=5"),
            Violation::EmptyText(stage) => write!(f, "empty {stage} text"),
            Violation::ConsistencyOutOfRange(c) => write!(f, "consistency {c} outside 1..=5"),
            Violation::IdeaMismatch => f.write_str("judge idea differs from idea_dream"),
            Violation::GateInconsistency => f.write_str("gate inconsistency"),
            Violation::RewakeWithoutGate => f.write_str("rewake_out present on ungated run"),
            Violation::MissingRewake => f.write_str("gated run has no rewake_out and no rewake failure"),
            Violation::SimilarityWithoutIdeas => f.write_str("similarity present without both ideas"),
            Violation::MissingSimilarity => {
                f.write_str("both ideas present but no similarity and no similarity annotation")
            }
            Violation::SimilarityOutOfRange(s) => write!(f, "similarity {s} outside [-1, 1]"),
            Violation::ScoreOutOfRange => f.write_str("review score outside 1..=5"),
            Violation::SumMismatch => f.write_str("sum mismatch"),
        }
    }
}

/// Checks every record invariant and returns the ones that fail. Empty means valid.
pub fn validate_record(record: &RunRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(e) = record.config.validate() {
        out.push(Violation::Config(e));
    }
    if !(1..=5).contains(&record.gate_threshold) {
        out.push(Violation::GateThreshold(record.gate_threshold));
    }
    for (stage, text) in [
        (Stage::Wake, &record.wake_out),
        (Stage::IdeaWake, &record.idea_wake),
        (Stage::Dream, &record.dream_out),
        (Stage::Judge, &record.idea_dream),
        (Stage::Rewake, &record.rewake_out),
    ] {
        if text.as_deref().is_some_and(|t| t.trim().is_empty()) {
            out.push(Violation::EmptyText(stage));
        }
    }

    match &record.judge {
        Some(verdict) => {
            if !(1..=5).contains(&verdict.consistency) {
                out.push(Violation::ConsistencyOutOfRange(verdict.consistency));
            }
            if verdict.idea != record.idea_dream {
                out.push(Violation::IdeaMismatch);
            }
            let passes = verdict.consistency >= record.gate_threshold && verdict.idea.is_some();
            if passes != record.gated {
                out.push(Violation::GateInconsistency);
            }
        }
        None => {
            // Imported rows may carry a gated outcome without the verdict that produced it.
            // A run that stopped at or before the judge can never be gated.
            let stopped_early = matches!(
                record.failed_stage,
                Some(Stage::Wake | Stage::Dream | Stage::Judge)
            );
            if record.gated && stopped_early {
                out.push(Violation::GateInconsistency);
            }
        }
    }

    if record.rewake_out.is_some() && !record.gated {
        out.push(Violation::RewakeWithoutGate);
    }
    if record.gated && record.rewake_out.is_none() && record.failed_stage != Some(Stage::Rewake) {
        out.push(Violation::MissingRewake);
    }

    let both_ideas = record.idea_wake.is_some() && record.idea_dream.is_some();
    match record.similarity {
        Some(s) => {
            if !both_ideas {
                out.push(Violation::SimilarityWithoutIdeas);
            }
            if !(s.is_finite() && (-1.0..=1.0).contains(&s)) {
                out.push(Violation::SimilarityOutOfRange(s));
            }
        }
        None => {
            let explained = record.annotations.iter().any(|a| a.stage == Stage::Similarity);
            if both_ideas && !explained {
                out.push(Violation::MissingSimilarity);
            }
        }
    }

    if let Some(review) = &record.review {
        let parts = [review.alignment, review.coherence, review.novelty];
        if parts.iter().any(|v| !(1..=5).contains(v)) {
            out.push(Violation::ScoreOutOfRange);
        }
        let computed: u32 = parts.iter().map(|&v| u32::from(v)).sum();
        if computed != u32::from(review.sum) {
            out.push(Violation::SumMismatch);
        }
    }
    out
}

/// Embedding of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DomainError> {
        if values.is_empty() {
            return Err(DomainError::InvalidParameter("embedding must have dim > 0".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(DomainError::InvalidParameter(format!(
                "embedding contains non-finite value {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
