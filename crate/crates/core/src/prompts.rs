//! Prompt rendering.
//!
//! Prompt texts live in `prompts/<version>/*.txt` with `{{name}}` placeholders
//! and are compiled into the binary. Substitution is a single left-to-right
//! pass, so placeholder-like text inside substituted values is left alone.
//! [`PROMPT_VERSION`] is stored on every run record.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{ConceptPair, TemplateId};

pub const PROMPT_VERSION: &str = "v1";

/// Re-articulation budget added on top of the ideation word limit.
pub const REWAKE_EXTRA_WORDS: u32 = 100;

const TEMPLATE_1: &str = include_str!("../prompts/v1/template1.txt");
const TEMPLATE_2: &str = include_str!("../prompts/v1/template2.txt");
const TEMPLATE_3: &str = include_str!("../prompts/v1/template3.txt");
const DREAM_CONTEXT: &str = include_str!("../prompts/v1/dream_context.txt");
const JUDGE: &str = include_str!("../prompts/v1/judge.txt");
const REWAKE: &str = include_str!("../prompts/v1/rewake.txt");
const REVIEW: &str = include_str!("../prompts/v1/review.txt");
const JSON_REMINDER: &str = include_str!("../prompts/v1/json_reminder.txt");

const CANDIDATE_OPEN: &str = "<<<CANDIDATE\n";
const CANDIDATE_CLOSE: &str = "\nCANDIDATE>>>";
const PROMPT_OPEN: &str = "<<<PROMPT\n";
const PROMPT_CLOSE: &str = "\nPROMPT>>>";
const OUTPUT_OPEN: &str = "<<<OUTPUT\n";
const OUTPUT_CLOSE: &str = "\nOUTPUT>>>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown template id {0}")]
    UnknownTemplate(u8),
    #[error("word limit must be positive")]
    ZeroWordLimit,
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("template references unknown placeholder {{{{{0}}}}}")]
    UnknownPlaceholder(String),
}

/// Replaces each `{{name}}` in `template` with `values[name]`.
fn render(template: &str, values: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
    let template = template.trim_end_matches('\n');
    let mut out = String::with_capacity(template.len() + values.values().map(|v| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return Ok(out);
        };
        let name = &after[..end];
        let is_ident = !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_');
        if is_ident {
            let value = values
                .get(name)
                .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
            out.push_str(value);
        } else {
            out.push_str(&rest[start..start + 2 + end + 2]);
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Raw pattern of an ideation template, placeholders included.
pub fn ideation_pattern(template: TemplateId) -> &'static str {
    match template.get() {
        1 => TEMPLATE_1,
        2 => TEMPLATE_2,
        _ => TEMPLATE_3,
    }
    .trim_end_matches('\n')
}

pub fn render_ideation_prompt(template_id: u8, pair: &ConceptPair, word_limit: u32) -> Result<String, PromptError> {
    let template = TemplateId::try_from(template_id).map_err(|_| PromptError::UnknownTemplate(template_id))?;
    if word_limit == 0 {
        return Err(PromptError::ZeroWordLimit);
    }
    let z = word_limit.to_string();
    render(
        ideation_pattern(template),
        &BTreeMap::from([("x", pair.x.as_str()), ("y", pair.y.as_str()), ("z", z.as_str())]),
    )
}

/// Ideation prompt followed by a delimited block carrying the wake output.
pub fn render_dream_prompt_with_context(ideation_prompt: &str, wake_out: &str) -> Result<String, PromptError> {
    if wake_out.trim().is_empty() {
        return Err(PromptError::EmptyInput("wake output"));
    }
    render(
        DREAM_CONTEXT,
        &BTreeMap::from([("prompt", ideation_prompt), ("wake_out", wake_out)]),
    )
}

pub fn render_judge_prompt(candidate_text: &str) -> Result<String, PromptError> {
    if candidate_text.trim().is_empty() {
        return Err(PromptError::EmptyInput("candidate text"));
    }
    render(JUDGE, &BTreeMap::from([("candidate", candidate_text)]))
}

/// Word budget for re-articulating an idea generated under `word_limit`.
pub fn rewake_budget(word_limit: u32) -> u32 {
    word_limit.saturating_add(REWAKE_EXTRA_WORDS)
}

pub fn render_rewake_prompt(idea: &str, word_limit: u32) -> Result<String, PromptError> {
    if idea.trim().is_empty() {
        return Err(PromptError::EmptyInput("idea"));
    }
    let budget = rewake_budget(word_limit).to_string();
    render(REWAKE, &BTreeMap::from([("idea", idea), ("budget", budget.as_str())]))
}

pub fn render_review_prompt(original_prompt: &str, rewake_out: &str) -> Result<String, PromptError> {
    if original_prompt.trim().is_empty() {
        return Err(PromptError::EmptyInput("original prompt"));
    }
    if rewake_out.trim().is_empty() {
        return Err(PromptError::EmptyInput("re-wake output"));
    }
    render(
        REVIEW,
        &BTreeMap::from([("prompt", original_prompt), ("output", rewake_out)]),
    )
}

/// `prompt` with the terse JSON-only reminder appended, for re-asking.
pub fn with_json_reminder(prompt: &str) -> String {
    format!("{prompt}\n\n{}", JSON_REMINDER.trim_end())
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text.rfind(close)?;
    (end >= start).then(|| &text[start..end])
}

/// Candidate text embedded in a judge prompt.
pub fn judge_candidate(prompt: &str) -> Option<&str> {
    between(prompt, CANDIDATE_OPEN, CANDIDATE_CLOSE)
}

/// (original prompt, output) embedded in a review prompt.
pub fn review_parts(prompt: &str) -> Option<(&str, &str)> {
    let original = {
        let start = prompt.find(PROMPT_OPEN)? + PROMPT_OPEN.len();
        let end = start + prompt[start..].find(PROMPT_CLOSE)?;
        &prompt[start..end]
    };
    let output = between(prompt, OUTPUT_OPEN, OUTPUT_CLOSE)?;
    Some((original, output))
}
