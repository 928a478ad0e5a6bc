//! Post-hoc review of final outputs and high-quality filtering.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::Serialize;
use thiserror::Error;

use crate::backends::{BackendRegistry, GenerationRequest, Role};
use crate::domain::{ReviewScores, RunRecord, Stage};
use crate::pipeline::ideation_prompt;
use crate::prompts::{self, PromptError};
use crate::structured::{ask_structured, parse_review_reply, StructuredError};

pub const DEFAULT_HIGH_QUALITY_THRESHOLD: u8 = 14;
pub const REVIEW_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReviewError {
    #[error("run {0} has no rewake_out to review")]
    NothingToReview(u64),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Structured(#[from] StructuredError),
}

/// Review prompt for `record`: the original ideation prompt and the final output only.
pub fn review_prompt(record: &RunRecord) -> Result<String, ReviewError> {
    let output = record
        .rewake_out
        .as_deref()
        .ok_or(ReviewError::NothingToReview(record.run_id()))?;
    let original = ideation_prompt(&record.config)?;
    Ok(prompts::render_review_prompt(&original, output)?)
}

/// Scores one record's final output. The reviewer is called unseeded at temperature 0.
pub fn review_record(registry: &BackendRegistry, record: &RunRecord, max_reasks: u32) -> Result<ReviewScores, ReviewError> {
    let req = GenerationRequest {
        prompt: review_prompt(record)?,
        temperature: REVIEW_TEMPERATURE,
        seed: None,
        max_output: None,
        role: Role::Review,
    };
    Ok(ask_structured(registry, &req, max_reasks, parse_review_reply)?.value)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReviewSummary {
    pub reviewed: usize,
    pub failed: usize,
    /// Ungated or already-reviewed records.
    pub skipped: usize,
}

/// Reviews every gated, not-yet-reviewed record with `jobs` workers.
///
/// Failures leave `review` empty and add a review annotation; a later pass
/// replaces that annotation.
pub fn review_all(registry: &BackendRegistry, records: &mut [RunRecord], jobs: usize, max_reasks: u32) -> ReviewSummary {
    let todo: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].rewake_out.is_some() && records[i].review.is_none())
        .collect();
    let mut summary = ReviewSummary {
        skipped: records.len() - todo.len(),
        ..Default::default()
    };

    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(todo.len()));
    {
        let snapshot: &[RunRecord] = records;
        thread::scope(|s| {
            for _ in 0..jobs.clamp(1, todo.len().max(1)) {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&i) = todo.get(k) else { break };
                    let outcome = review_record(registry, &snapshot[i], max_reasks);
                    results.lock().expect("results lock").push((i, outcome));
                });
            }
        });
    }

    for (i, outcome) in results.into_inner().expect("results lock") {
        let record = &mut records[i];
        record.annotations.retain(|a| a.stage != Stage::Review);
        match outcome {
            Ok(scores) => {
                record.review = Some(scores);
                summary.reviewed += 1;
            }
            Err(e) => {
                log::warn!("review of run {} failed: {e}", record.run_id());
                record.annotate(Stage::Review, e.to_string());
                summary.failed += 1;
            }
        }
    }
    summary
}

/// Reviewed records with `sum >= threshold`, ordered by run_id.
pub fn filter_high_quality(records: &[RunRecord], threshold: u8) -> Vec<&RunRecord> {
    let mut out: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.review.is_some_and(|s| s.sum >= threshold))
        .collect();
    out.sort_by_key(|r| r.run_id());
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::mock::{HashEmbedder, HeuristicReviewer, ScriptedBackend};
    use crate::backends::RetryPolicy;
    use crate::domain::tests::gated_record;
    use crate::persistence::reference_runs;

    fn registry(reviewer: Arc<dyn crate::backends::TextBackend>) -> BackendRegistry {
        BackendRegistry::builder()
            .all_roles(Arc::new(ScriptedBackend::new("unused")))
            .role(Role::Review, reviewer)
            .embedder(Arc::new(HashEmbedder::new(8)))
            .retry(RetryPolicy::immediate())
            .audit(true)
            .build()
            .unwrap()
    }

    #[test]
    fn scores_from_reviewer_reply() {
        let reg = registry(Arc::new(
            ScriptedBackend::new("r").default_reply(r#"{"alignment":5,"coherence":5,"novelty":4}"#),
        ));
        let s = review_record(&reg, &gated_record(), 2).unwrap();
        assert_eq!((s.alignment, s.coherence, s.novelty, s.sum), (5, 5, 4, 14));
        let call = &reg.audit_log()[0];
        assert_eq!(call.request.temperature, 0.0);
        assert_eq!(call.request.seed, None);
    }

    #[test]
    fn out_of_range_scores_fail_after_reasks() {
        let reg = registry(Arc::new(
            ScriptedBackend::new("r").default_reply(r#"{"alignment":0,"coherence":5,"novelty":5}"#),
        ));
        assert!(matches!(
            review_record(&reg, &gated_record(), 2),
            Err(ReviewError::Structured(StructuredError::Malformed { attempts: 3, .. }))
        ));
    }

    #[test]
    fn review_prompt_excludes_intermediates() {
        let mut r = gated_record();
        r.wake_out = Some("SENTINEL-WAKE".into());
        r.dream_out = Some("SENTINEL-DREAM".into());
        r.idea_wake = Some("SENTINEL-IDEA-WAKE".into());
        r.idea_dream = Some("SENTINEL-IDEA-DREAM".into());
        r.rewake_out = Some("SENTINEL-FINAL".into());
        let p = review_prompt(&r).unwrap();
        assert!(p.contains("SENTINEL-FINAL"));
        assert!(p.contains(&ideation_prompt(&r.config).unwrap()));
        for s in ["SENTINEL-WAKE", "SENTINEL-DREAM", "SENTINEL-IDEA"] {
            assert!(!p.contains(s), "{s} leaked into review prompt");
        }
    }

    #[test]
    fn review_all_skips_ungated_and_reviewed() {
        let reg = registry(Arc::new(HeuristicReviewer::new("r")));
        let mut ungated = gated_record();
        ungated.config.run_id = 1;
        ungated.gated = false;
        ungated.rewake_out = None;
        let mut done = gated_record();
        done.config.run_id = 2;
        done.review = Some(ReviewScores::new(1, 1, 1).unwrap());
        let mut todo = gated_record();
        todo.config.run_id = 3;
        let mut records = vec![ungated, done, todo];
        let summary = review_all(&reg, &mut records, 2, 2);
        assert_eq!(
            summary,
            ReviewSummary {
                reviewed: 1,
                failed: 0,
                skipped: 2
            }
        );
        assert!(records[0].review.is_none());
        assert_eq!(records[1].review.unwrap().sum, 3);
        assert!(records[2].review.is_some());
        // A second pass changes nothing.
        let before = records.clone();
        review_all(&reg, &mut records, 2, 2);
        assert_eq!(records, before);
    }

    #[test]
    fn failures_annotate_and_are_replaced() {
        let reg = registry(Arc::new(ScriptedBackend::new("r").default_reply("great work")));
        let mut records = vec![gated_record()];
        let s = review_all(&reg, &mut records, 1, 2);
        assert_eq!(s.failed, 1);
        assert_eq!(records[0].annotations.len(), 1);
        review_all(&reg, &mut records, 1, 2);
        assert_eq!(records[0].annotations.len(), 1);
    }

    #[test]
    fn high_quality_subset_of_reference_runs() {
        let runs = reference_runs();
        let ids = |t| filter_high_quality(&runs, t).iter().map(|r| r.run_id()).collect::<Vec<_>>();
        assert_eq!(ids(14), vec![106, 113, 120, 130, 241, 242, 248, 255, 336, 338, 382]);
        assert_eq!(ids(15), vec![336]);
        assert!(ids(16).is_empty());
    }
}
