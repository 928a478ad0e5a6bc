//! One run as a fixed sequence of stages: wake, dream, judge, idea_wake
//! extraction, gate, re-wake, similarity.

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{attach_similarity, EmbeddingCache};
use crate::backends::{BackendError, BackendRegistry, GenerationRequest, Role};
use crate::domain::{DomainError, DreamContext, JudgeVerdict, RunConfig, RunRecord, Stage, StageOutput};
use crate::prompts::{self, PromptError, PROMPT_VERSION};
use crate::structured::{ask_structured, parse_judge_reply, StructuredError, DEFAULT_MAX_REASKS};
use crate::text::contains_normalized;

pub const DEFAULT_GATE_THRESHOLD: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct GateConfig {
    threshold: u8,
}

impl GateConfig {
    pub fn new(threshold: u8) -> Result<Self, DomainError> {
        if (1..=5).contains(&threshold) {
            Ok(Self { threshold })
        } else {
            Err(DomainError::InvalidParameter(format!(
                "gate threshold must be in 1..=5, got {threshold}"
            )))
        }
    }

    pub fn threshold(self) -> u8 {
        self.threshold
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_GATE_THRESHOLD,
        }
    }
}

impl TryFrom<u8> for GateConfig {
    type Error = DomainError;
    fn try_from(t: u8) -> Result<Self, Self::Error> {
        Self::new(t)
    }
}

impl From<GateConfig> for u8 {
    fn from(g: GateConfig) -> u8 {
        g.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub gate: GateConfig,
    pub dream_context: DreamContext,
    pub max_reasks: u32,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            dream_context: DreamContext::default(),
            max_reasks: DEFAULT_MAX_REASKS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Structured(#[from] StructuredError),
    #[error("precondition failed: {0}")]
    Precondition(&'static str),
}

/// Content hash of everything that shapes a run's requests.
pub fn config_hash(config: &RunConfig, options: &PipelineOptions) -> String {
    let payload = serde_json::json!({
        "config": config,
        "prompt_version": PROMPT_VERSION,
        "dream_context": options.dream_context,
        "gate": options.gate.threshold(),
        "max_reasks": options.max_reasks,
    });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    format!("{digest:x}")
}

pub fn ideation_prompt(config: &RunConfig) -> Result<String, PromptError> {
    prompts::render_ideation_prompt(config.template.get(), &config.pair, config.word_limit)
}

fn request(role: Role, prompt: String, temperature: f64, seed: u64) -> GenerationRequest {
    GenerationRequest {
        prompt,
        temperature,
        seed: Some(seed),
        max_output: None,
        role,
    }
}

pub fn run_wake(registry: &BackendRegistry, config: &RunConfig) -> Result<StageOutput, StageError> {
    let prompt = ideation_prompt(config)?;
    let text = registry.generate(&request(Role::Wake, prompt, config.wake_temperature, config.seed))?;
    Ok(StageOutput {
        stage: Stage::Wake,
        text,
        idea: None,
    })
}

pub fn run_dream(
    registry: &BackendRegistry,
    config: &RunConfig,
    wake_out: &str,
    context: DreamContext,
) -> Result<StageOutput, StageError> {
    let base = ideation_prompt(config)?;
    let prompt = match context {
        DreamContext::WithWake => prompts::render_dream_prompt_with_context(&base, wake_out)?,
        DreamContext::PromptOnly => base,
    };
    let text = registry.generate(&request(Role::Dream, prompt, config.dream_temperature, config.seed))?;
    Ok(StageOutput {
        stage: Stage::Dream,
        text,
        idea: None,
    })
}

/// Scores `candidate` with the judge role; malformed replies are re-asked up to `max_reasks` times.
pub fn run_judge(
    registry: &BackendRegistry,
    config: &RunConfig,
    candidate: &str,
    max_reasks: u32,
) -> Result<JudgeVerdict, StageError> {
    if candidate.trim().is_empty() {
        return Err(StageError::Precondition("judge candidate is empty"));
    }
    let prompt = prompts::render_judge_prompt(candidate)?;
    let req = request(Role::Judge, prompt, config.judge_temperature, config.seed);
    let reply = ask_structured(registry, &req, max_reasks, parse_judge_reply)?;
    let (consistency, idea) = reply.value;
    Ok(JudgeVerdict::new(i64::from(consistency), idea, reply.raw).expect("range checked by parser"))
}

/// Representative sentence of `stage_text`, via the judge protocol.
pub fn extract_idea(
    registry: &BackendRegistry,
    config: &RunConfig,
    stage_text: &str,
    max_reasks: u32,
) -> Result<Option<String>, StageError> {
    Ok(run_judge(registry, config, stage_text, max_reasks)?.idea)
}

/// True iff the verdict meets the threshold and carries an idea to re-articulate.
pub fn gate(verdict: &JudgeVerdict, gate: GateConfig) -> bool {
    verdict.consistency >= gate.threshold() && verdict.idea.is_some()
}

/// Re-articulates `idea` with the rewake role (the wake model) at wake temperature.
pub fn run_rewake(registry: &BackendRegistry, config: &RunConfig, idea: Option<&str>) -> Result<StageOutput, StageError> {
    let idea = idea
        .filter(|i| !i.trim().is_empty())
        .ok_or(StageError::Precondition("re-wake needs an idea"))?;
    let prompt = prompts::render_rewake_prompt(idea, config.word_limit)?;
    let text = registry.generate(&request(Role::Rewake, prompt, config.wake_temperature, config.seed))?;
    Ok(StageOutput {
        stage: Stage::Rewake,
        text,
        idea: None,
    })
}

/// Runs every stage for `config` and returns the record.
///
/// Never fails: a stage error stops the run, marks the record failed at that
/// stage and keeps every earlier output.
pub fn execute_run(registry: &BackendRegistry, config: &RunConfig, options: &PipelineOptions) -> RunRecord {
    let mut record = RunRecord::pending(
        config.clone(),
        PROMPT_VERSION,
        options.dream_context,
        options.gate.threshold(),
    );
    record.config_hash = Some(config_hash(config, options));
    record.started_at = Some(Utc::now());
    if let Err(e) = config.validate() {
        record.fail(Stage::Wake, format!("invalid config: {e}"));
    } else {
        run_stages(registry, config, options, &mut record);
    }
    record.finished_at = Some(Utc::now());
    record
}

fn run_stages(registry: &BackendRegistry, config: &RunConfig, options: &PipelineOptions, record: &mut RunRecord) {
    let wake = match run_wake(registry, config) {
        Ok(out) => out.text,
        Err(e) => return record.fail(Stage::Wake, e.to_string()),
    };
    record.wake_out = Some(wake.clone());

    let dream = match run_dream(registry, config, &wake, options.dream_context) {
        Ok(out) => out.text,
        Err(e) => return record.fail(Stage::Dream, e.to_string()),
    };
    record.dream_out = Some(dream.clone());

    let verdict = match run_judge(registry, config, &dream, options.max_reasks) {
        Ok(v) => v,
        Err(e) => return record.fail(Stage::Judge, e.to_string()),
    };
    if let Some(idea) = &verdict.idea {
        if !contains_normalized(&dream, idea) {
            record.annotate(Stage::Judge, "idea is not a verbatim sentence of dream_out");
        }
    }
    record.idea_dream = verdict.idea.clone();
    record.gated = gate(&verdict, options.gate);
    if verdict.consistency >= options.gate.threshold() && verdict.idea.is_none() {
        record.annotate(Stage::Judge, "consistency passes the gate but no idea was given; re-wake skipped");
    }
    record.judge = Some(verdict);

    match extract_idea(registry, config, &wake, options.max_reasks) {
        Ok(Some(idea)) => record.idea_wake = Some(idea),
        Ok(None) => record.annotate(Stage::IdeaWake, "judge returned no idea for wake_out"),
        Err(e) => record.annotate(Stage::IdeaWake, format!("idea_wake extraction failed: {e}")),
    }

    if record.gated {
        match run_rewake(registry, config, record.idea_dream.as_deref()) {
            Ok(out) => record.rewake_out = Some(out.text),
            Err(e) => record.fail(Stage::Rewake, e.to_string()),
        }
    }

    let mut cache = EmbeddingCache::new(registry.embedder());
    attach_similarity(record, &mut cache);
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::mock::{HashEmbedder, ScriptedBackend, ScriptedReply, SeededStochasticBackend};
    use crate::backends::RetryPolicy;
    use crate::domain::tests::sample_config;
    use crate::domain::validate_record;

    fn registry(wake: ScriptedBackend, dream: ScriptedBackend, judge: ScriptedBackend) -> BackendRegistry {
        let wake = Arc::new(wake);
        BackendRegistry::builder()
            .role(Role::Wake, wake.clone())
            .role(Role::Rewake, wake)
            .role(Role::Dream, Arc::new(dream))
            .role(Role::Judge, Arc::new(judge))
            .role(Role::Review, Arc::new(ScriptedBackend::new("review")))
            .embedder(Arc::new(HashEmbedder::new(32)))
            .retry(RetryPolicy::immediate())
            .audit(true)
            .build()
            .unwrap()
    }

    fn happy() -> BackendRegistry {
        registry(
            ScriptedBackend::new("wake")
                .contains("Present the following idea", "REWAKE TEXT.")
                .default_reply("Wake one. Wake anchor."),
            ScriptedBackend::new("dream").default_reply("Dream one. Dream idea."),
            ScriptedBackend::new("judge")
                .contains("Dream one.", r#"{"consistency":5,"idea":"Dream idea."}"#)
                .contains("Wake one.", r#"{"consistency":5,"idea":"Wake anchor."}"#),
        )
    }

    #[test]
    fn gate_rule() {
        let g = GateConfig::default();
        let v = |c, idea: Option<&str>| JudgeVerdict::new(c, idea.map(String::from), "").unwrap();
        assert!(gate(&v(5, Some("i")), g));
        assert!(gate(&v(4, Some("i")), g));
        assert!(!gate(&v(3, Some("i")), g));
        assert!(!gate(&v(5, None), g));
        assert!(GateConfig::new(0).is_err());
        assert!(GateConfig::new(6).is_err());
    }

    #[test]
    fn happy_path_in_stage_order() {
        let reg = happy();
        let rec = execute_run(&reg, &sample_config(), &PipelineOptions::default());
        assert!(validate_record(&rec).is_empty(), "{:?}", validate_record(&rec));
        assert!(rec.gated);
        assert_eq!(rec.rewake_out.as_deref(), Some("REWAKE TEXT."));
        assert_eq!(rec.idea_wake.as_deref(), Some("Wake anchor."));
        assert_eq!(rec.idea_dream.as_deref(), Some("Dream idea."));
        assert!(rec.similarity.is_some());
        assert!(rec.annotations.is_empty());

        let audit = reg.audit_log();
        let roles: Vec<Role> = audit.iter().map(|c| c.role).collect();
        assert_eq!(roles, vec![Role::Wake, Role::Dream, Role::Judge, Role::Judge, Role::Rewake]);
        // The judge's first call scores the dream output, not the wake output.
        assert!(audit[2].request.prompt.contains("Dream one."));
        assert_eq!(audit[4].model_name, "wake");
        assert_eq!(audit[4].request.temperature, 0.6);
        assert!(audit[4].request.prompt.contains("250 words"));
    }

    #[test]
    fn low_consistency_is_not_gated() {
        let reg = registry(
            ScriptedBackend::new("wake").default_reply("Wake one. Wake anchor."),
            ScriptedBackend::new("dream").default_reply("Dream one. Dream idea."),
            ScriptedBackend::new("judge").default_reply(r#"{"consistency":2,"idea":"Dream idea."}"#),
        );
        let rec = execute_run(&reg, &sample_config(), &PipelineOptions::default());
        assert!(!rec.gated);
        assert!(rec.rewake_out.is_none());
        assert!(validate_record(&rec).is_empty());
        assert!(reg.audit_log().iter().all(|c| c.role != Role::Rewake));
    }

    #[test]
    fn dream_failure_keeps_wake() {
        let reg = registry(
            ScriptedBackend::new("wake").default_reply("Wake one."),
            ScriptedBackend::new("dream").default_error(BackendError::Status {
                status: 400,
                body: "nope".into(),
            }),
            ScriptedBackend::new("judge").default_reply(r#"{"consistency":5,"idea":"x"}"#),
        );
        let rec = execute_run(&reg, &sample_config(), &PipelineOptions::default());
        assert_eq!(rec.failed_stage, Some(Stage::Dream));
        assert_eq!(rec.wake_out.as_deref(), Some("Wake one."));
        assert!(rec.dream_out.is_none() && rec.judge.is_none());
        assert!(validate_record(&rec).is_empty());
        assert!(reg.audit_log().iter().all(|c| c.role != Role::Judge));
    }

    #[test]
    fn malformed_judge_reply_is_reasked_twice_then_fails() {
        let reg = registry(
            ScriptedBackend::new("wake").default_reply("Wake one."),
            ScriptedBackend::new("dream").default_reply("Dream one."),
            ScriptedBackend::new("judge").default_reply("I think this is quite consistent."),
        );
        let rec = execute_run(&reg, &sample_config(), &PipelineOptions::default());
        assert_eq!(rec.failed_stage, Some(Stage::Judge));
        assert!(!rec.gated);
        let judge_calls: Vec<_> = reg.audit_log().into_iter().filter(|c| c.role == Role::Judge).collect();
        assert_eq!(judge_calls.len(), 3);
        assert!(!judge_calls[0].request.prompt.ends_with("Respond with only the JSON object."));
        assert!(judge_calls[1].request.prompt.ends_with("Respond with only the JSON object."));
    }

    #[test]
    fn judge_recovers_on_reask() {
        let reg = registry(
            ScriptedBackend::new("wake").default_reply("Wake one."),
            ScriptedBackend::new("dream").default_reply("Dream one."),
            ScriptedBackend::new("judge").contains_seq(
                "CANDIDATE",
                vec![
                    ScriptedReply::from("Sure, here you go"),
                    ScriptedReply::from(r#"{"consistency":3,"idea":"Dream one."}"#),
                ],
            ),
        );
        let v = run_judge(&reg, &sample_config(), "Dream one.", 2).unwrap();
        assert_eq!((v.consistency, v.idea.as_deref()), (3, Some("Dream one.")));
    }

    #[test]
    fn out_of_range_consistency_fails_judge() {
        let reg = registry(
            ScriptedBackend::new("wake").default_reply("Wake one."),
            ScriptedBackend::new("dream").default_reply("Dream one."),
            ScriptedBackend::new("judge").default_reply(r#"{"consistency":6,"idea":"x"}"#),
        );
        let rec = execute_run(&reg, &sample_config(), &PipelineOptions::default());
        assert_eq!(rec.failed_stage, Some(Stage::Judge));
    }

    #[test]
    fn rewake_requires_idea() {
        assert_eq!(
            run_rewake(&happy(), &sample_config(), None).unwrap_err(),
            StageError::Precondition("re-wake needs an idea")
        );
    }

    #[test]
    fn dream_context_modes() {
        let reg = happy();
        let cfg = sample_config();
        run_dream(&reg, &cfg, "WAKE-CONTEXT", DreamContext::WithWake).unwrap();
        run_dream(&reg, &cfg, "WAKE-CONTEXT", DreamContext::PromptOnly).unwrap();
        let audit = reg.audit_log();
        assert!(audit[0].request.prompt.contains("WAKE-CONTEXT"));
        assert_eq!(audit[1].request.prompt, ideation_prompt(&cfg).unwrap());
        assert_eq!(audit[1].request.temperature, 1.0);
    }

    #[test]
    fn seeded_mock_is_deterministic() {
        let stochastic = Arc::new(SeededStochasticBackend::new("stoch"));
        let reg = BackendRegistry::builder()
            .all_roles(stochastic)
            .embedder(Arc::new(HashEmbedder::new(16)))
            .build()
            .unwrap();
        let cfg = sample_config();
        assert_eq!(run_wake(&reg, &cfg).unwrap(), run_wake(&reg, &cfg).unwrap());
        let a = run_dream(&reg, &cfg, "w", DreamContext::WithWake).unwrap();
        assert_eq!(a, run_dream(&reg, &cfg, "w", DreamContext::WithWake).unwrap());
        let mut hot = cfg.clone();
        hot.dream_temperature = 10.0;
        assert_ne!(a.text, run_dream(&reg, &hot, "w", DreamContext::WithWake).unwrap().text);

        let distinct: std::collections::BTreeSet<String> = (0..5)
            .map(|s| {
                let mut c = cfg.clone();
                c.seed = s;
                run_wake(&reg, &c).unwrap().text
            })
            .collect();
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn capped_dream_backend_rejects_high_temperature() {
        let reg = registry(
            ScriptedBackend::new("wake").default_reply("Wake one."),
            ScriptedBackend::new("dream").max_temperature(2.0).default_reply("Dream."),
            ScriptedBackend::new("judge").default_reply(r#"{"consistency":5,"idea":"x"}"#),
        );
        let mut cfg = sample_config();
        cfg.dream_temperature = 10.0;
        let rec = execute_run(&reg, &cfg, &PipelineOptions::default());
        assert_eq!(rec.failed_stage, Some(Stage::Dream));
        assert!(rec.annotations[0].message.contains("exceeds"));
    }

    #[test]
    fn config_hash_tracks_options() {
        let cfg = sample_config();
        let a = config_hash(&cfg, &PipelineOptions::default());
        assert_eq!(a, config_hash(&cfg, &PipelineOptions::default()));
        assert_eq!(a.len(), 64);
        let other = PipelineOptions {
            dream_context: DreamContext::PromptOnly,
            ..Default::default()
        };
        assert_ne!(a, config_hash(&cfg, &other));
        let mut hot = cfg.clone();
        hot.dream_temperature = 3.0;
        assert_ne!(a, config_hash(&hot, &PipelineOptions::default()));
    }
}
