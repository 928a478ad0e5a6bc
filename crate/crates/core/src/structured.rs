//! Strict JSON replies from judge and reviewer models.
//!
//! A reply must be a single JSON object, optionally wrapped in a markdown code
//! fence. Prose around the object is rejected rather than repaired; the caller
//! re-asks instead.

use serde_json::{Map, Value};
use thiserror::Error;

use crate::backends::{BackendError, BackendRegistry, GenerationRequest};
use crate::domain::{DomainError, ReviewScores};
use crate::prompts;

/// Re-asks after the first malformed reply.
pub const DEFAULT_MAX_REASKS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplyError {
    #[error("reply is not a single JSON object: {0}")]
    NotJson(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{0}` has the wrong type")]
    WrongType(&'static str),
    #[error(transparent)]
    OutOfRange(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructuredError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no valid reply after {attempts} attempts: {error}")]
    Malformed {
        attempts: u32,
        error: ReplyError,
        /// Last reply received.
        raw: String,
    },
}

fn strip_fence(text: &str) -> &str {
    let Some(inner) = text.strip_prefix("```") else {
        return text;
    };
    let Some(inner) = inner.strip_suffix("```") else {
        return text;
    };
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    inner.trim()
}

pub fn extract_json_object(reply: &str) -> Result<Map<String, Value>, ReplyError> {
    let body = strip_fence(reply.trim());
    if !(body.starts_with('{') && body.ends_with('}')) {
        return Err(ReplyError::NotJson(snippet(reply)));
    }
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ReplyError::NotJson(snippet(reply))),
        Err(e) => Err(ReplyError::NotJson(format!("{e}: {}", snippet(reply)))),
    }
}

fn snippet(s: &str) -> String {
    let s = s.trim();
    match s.char_indices().nth(120) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

fn integer_field(map: &Map<String, Value>, key: &'static str) -> Result<i64, ReplyError> {
    let v = map.get(key).ok_or(ReplyError::MissingField(key))?;
    v.as_i64().ok_or(ReplyError::WrongType(key))
}

/// Judge reply → (consistency, idea). The score is range-checked here.
pub fn parse_judge_reply(reply: &str) -> Result<(u8, Option<String>), ReplyError> {
    let map = extract_json_object(reply)?;
    let consistency = integer_field(&map, "consistency")?;
    if !(1..=5).contains(&consistency) {
        return Err(DomainError::ScoreOutOfRange {
            name: "consistency",
            value: consistency,
        }
        .into());
    }
    let idea = match map.get("idea") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s.trim().is_empty() => None,
        Some(Value::String(s)) => Some(s.trim().to_string()),
        Some(_) => return Err(ReplyError::WrongType("idea")),
    };
    Ok((consistency as u8, idea))
}

/// Reviewer reply → scores. Any `sum` the reviewer includes is ignored.
pub fn parse_review_reply(reply: &str) -> Result<ReviewScores, ReplyError> {
    let map = extract_json_object(reply)?;
    Ok(ReviewScores::new(
        integer_field(&map, "alignment")?,
        integer_field(&map, "coherence")?,
        integer_field(&map, "novelty")?,
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Structured<T> {
    pub value: T,
    pub raw: String,
    pub attempts: u32,
}

/// Sends `request`, re-asking up to `max_reasks` times with a JSON-only
/// reminder appended while the reply fails `parse`.
pub fn ask_structured<T>(
    registry: &BackendRegistry,
    request: &GenerationRequest,
    max_reasks: u32,
    parse: impl Fn(&str) -> Result<T, ReplyError>,
) -> Result<Structured<T>, StructuredError> {
    let mut req = request.clone();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let raw = registry.generate(&req)?;
        match parse(&raw) {
            Ok(value) => return Ok(Structured { value, raw, attempts }),
            Err(error) if attempts > max_reasks => return Err(StructuredError::Malformed { attempts, error, raw }),
            Err(error) => {
                log::debug!("{} reply rejected ({error}); re-asking", request.role);
                req.prompt = prompts::with_json_reminder(&request.prompt);
            }
        }
    }
}
