#![allow(dead_code)]

use std::sync::Arc;

use remind_core::backends::mock::{HashEmbedder, HeuristicJudge, HeuristicReviewer, ScriptedBackend, SeededStochasticBackend};
use remind_core::backends::{BackendRegistry, RetryPolicy, Role, TextBackend};
use remind_core::domain::{ConceptPair, RunConfig, TemplateId};

pub fn config(run_id: u64, template: u8, words: u32, temperature: f64, seed: u64) -> RunConfig {
    RunConfig::new(
        run_id,
        ConceptPair::new("time-space", "time", "space").unwrap(),
        TemplateId::try_from(template).unwrap(),
        words,
        temperature,
        seed,
    )
    .unwrap()
}

/// Seeded generator for wake/dream/rewake, heuristic judge and reviewer.
pub fn mock_registry() -> BackendRegistry {
    let generator: Arc<dyn TextBackend> = Arc::new(SeededStochasticBackend::new("mock-generator"));
    BackendRegistry::builder()
        .role(Role::Wake, generator.clone())
        .role(Role::Rewake, generator.clone())
        .role(Role::Dream, generator)
        .role(Role::Judge, Arc::new(HeuristicJudge::new("mock-judge")))
        .role(Role::Review, Arc::new(HeuristicReviewer::new("mock-reviewer")))
        .embedder(Arc::new(HashEmbedder::new(64)))
        .retry(RetryPolicy::immediate())
        .audit(true)
        .build()
        .unwrap()
}

/// Registry with the given scripted judge; wake and dream answer from fixed texts.
pub fn scripted_registry(wake: &str, dream: &str, rewake: &str, judge: ScriptedBackend) -> BackendRegistry {
    let wake_backend = Arc::new(
        ScriptedBackend::new("wake-model")
            .contains("Present the following idea", rewake)
            .default_reply(wake),
    );
    BackendRegistry::builder()
        .role(Role::Wake, wake_backend.clone())
        .role(Role::Rewake, wake_backend)
        .role(Role::Dream, Arc::new(ScriptedBackend::new("dream-model").default_reply(dream)))
        .role(Role::Judge, Arc::new(judge))
        .role(Role::Review, Arc::new(HeuristicReviewer::new("mock-reviewer")))
        .embedder(Arc::new(HashEmbedder::new(64)))
        .retry(RetryPolicy::immediate())
        .audit(true)
        .build()
        .unwrap()
}

/// JSONL text with the timestamp fields removed from every record line.
pub fn strip_timestamps(jsonl: &str) -> String {
    jsonl
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            if let Some(obj) = v.as_object_mut() {
                obj.remove("started_at");
                obj.remove("finished_at");
            }
            v.to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}
