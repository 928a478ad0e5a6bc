//! Declarative backend configuration: named backends, a role map and one embedder.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::mock::{HashEmbedder, HeuristicJudge, HeuristicReviewer, ScriptedBackend, SeededStochasticBackend};
use super::openai::{OpenAiChatBackend, OpenAiEmbeddingBackend};
use super::{
    BackendCapabilities, BackendError, BackendRegistry, EmbeddingBackend, RetryPolicy, Role, TextBackend,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// OpenAI-compatible chat completions endpoint.
    Openai,
    MockStochastic,
    MockJudge,
    MockReviewer,
    Scripted,
}

/// Capability defaults for known server families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Local llama.cpp server: arbitrary temperatures, honors seeds.
    LlamaCpp,
    /// Hosted API: temperature capped at 2, seeds not guaranteed.
    Hosted,
}

impl Profile {
    fn max_temperature(self) -> f64 {
        match self {
            Profile::LlamaCpp => 100.0,
            Profile::Hosted => 2.0,
        }
    }

    fn supports_seed(self) -> bool {
        matches!(self, Profile::LlamaCpp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRuleSpec {
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub exact: Option<String>,
    #[serde(default)]
    pub reply: Option<String>,
    /// Fails the call with a non-retryable error carrying this message.
    #[serde(default)]
    pub fail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supports_seed: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<ScriptRuleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_reply: Option<String>,
}

impl BackendSpec {
    pub fn of_kind(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: None,
            model: None,
            api_key_env: None,
            timeout_secs: None,
            profile: None,
            max_temperature: None,
            supports_seed: None,
            script: Vec::new(),
            default_reply: None,
        }
    }

    /// Static capabilities declared by this entry; no network access.
    pub fn capabilities(&self, name: &str) -> Result<BackendCapabilities, BackendError> {
        let (default_max, default_seed) = match (self.kind, self.profile) {
            (_, Some(p)) => (p.max_temperature(), p.supports_seed()),
            (BackendKind::Openai, None) => (Profile::Hosted.max_temperature(), false),
            (BackendKind::MockJudge | BackendKind::MockReviewer, None) => (2.0, true),
            (_, None) => (100.0, true),
        };
        let model_name = match (self.kind, &self.model) {
            (_, Some(m)) => m.clone(),
            (BackendKind::Openai, None) => {
                return Err(BackendError::Config(format!("backend {name}: `model` is required")))
            }
            (_, None) => name.to_string(),
        };
        let max_temperature = self.max_temperature.unwrap_or(default_max);
        if !(max_temperature > 0.0) {
            return Err(BackendError::Config(format!(
                "backend {name}: max_temperature must be positive"
            )));
        }
        Ok(BackendCapabilities {
            max_temperature,
            supports_seed: self.supports_seed.unwrap_or(default_seed),
            model_name,
        })
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs.unwrap_or(600))
    }

    pub fn build(&self, name: &str) -> Result<Arc<dyn TextBackend>, BackendError> {
        let caps = self.capabilities(name)?;
        Ok(match self.kind {
            BackendKind::Openai => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| BackendError::Config(format!("backend {name}: `endpoint` is required")))?;
                let key = read_api_key(name, self.api_key_env.as_deref())?;
                Arc::new(OpenAiChatBackend::new(endpoint, caps, key, self.timeout())?)
            }
            BackendKind::MockStochastic => Arc::new(
                SeededStochasticBackend::new(&caps.model_name).max_temperature(caps.max_temperature),
            ),
            BackendKind::MockJudge => Arc::new(HeuristicJudge::new(&caps.model_name)),
            BackendKind::MockReviewer => Arc::new(HeuristicReviewer::new(&caps.model_name)),
            BackendKind::Scripted => {
                let mut b = ScriptedBackend::new(&caps.model_name)
                    .max_temperature(caps.max_temperature)
                    .supports_seed(caps.supports_seed);
                for (i, rule) in self.script.iter().enumerate() {
                    let reply = match (&rule.reply, &rule.fail) {
                        (Some(r), None) => super::mock::ScriptedReply::Text(r.clone()),
                        (None, Some(msg)) => super::mock::ScriptedReply::Error(BackendError::Status {
                            status: 400,
                            body: msg.clone(),
                        }),
                        _ => {
                            return Err(BackendError::Config(format!(
                                "backend {name}: script rule {i} needs exactly one of `reply` or `fail`"
                            )))
                        }
                    };
                    b = match (&rule.contains, &rule.exact) {
                        (Some(c), None) => b.contains_seq(c, vec![reply]),
                        (None, Some(e)) => b.exact_seq(e, vec![reply]),
                        _ => {
                            return Err(BackendError::Config(format!(
                                "backend {name}: script rule {i} needs exactly one of `contains` or `exact`"
                            )))
                        }
                    };
                }
                if let Some(d) = &self.default_reply {
                    b = b.default_reply(d);
                }
                Arc::new(b)
            }
        })
    }
}

fn read_api_key(name: &str, var: Option<&str>) -> Result<Option<String>, BackendError> {
    match var {
        None => Ok(None),
        Some(var) => std::env::var(var).map(Some).map_err(|_| {
            BackendError::Config(format!("backend {name}: environment variable {var} is not set"))
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Hash,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hash,
            dim: Some(64),
            endpoint: None,
            model: None,
            api_key_env: None,
            timeout_secs: None,
        }
    }
}

impl EmbeddingSpec {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingBackend>, BackendError> {
        match self.kind {
            EmbeddingKind::Hash => {
                let dim = self.dim.unwrap_or(64);
                if dim == 0 {
                    return Err(BackendError::Config("embedding dim must be positive".into()));
                }
                Ok(Arc::new(HashEmbedder::new(dim)))
            }
            EmbeddingKind::Openai => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| BackendError::Config("embedding: `endpoint` is required".into()))?;
                let model = self
                    .model
                    .as_deref()
                    .ok_or_else(|| BackendError::Config("embedding: `model` is required".into()))?;
                let key = read_api_key("embedding", self.api_key_env.as_deref())?;
                let timeout = Duration::from_secs(self.timeout_secs.unwrap_or(120));
                Ok(Arc::new(OpenAiEmbeddingBackend::new(endpoint, model, key, timeout)?))
            }
        }
    }
}

/// Named backends, a role → backend-name map and the embedder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySpec {
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub roles: BTreeMap<Role, String>,
    #[serde(default)]
    pub embedding: EmbeddingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_backoff_ms: Option<u64>,
}

impl RegistrySpec {
    /// Backend entry serving `role`. An unmapped rewake role reuses the wake backend.
    pub fn resolve(&self, role: Role) -> Result<(&str, &BackendSpec), BackendError> {
        let name = self
            .roles
            .get(&role)
            .or_else(|| (role == Role::Rewake).then(|| self.roles.get(&Role::Wake)).flatten())
            .ok_or_else(|| BackendError::Config(format!("role {role} is not mapped to a backend")))?;
        let spec = self
            .backends
            .get(name)
            .ok_or_else(|| BackendError::Config(format!("role {role} maps to undeclared backend {name}")))?;
        Ok((name, spec))
    }

    pub fn probe_capabilities(&self, role: Role) -> Result<BackendCapabilities, BackendError> {
        let (name, spec) = self.resolve(role)?;
        spec.capabilities(name)
    }

    /// Builds the registry. Roles naming the same backend share one instance.
    pub fn build(&self, audit: bool) -> Result<BackendRegistry, BackendError> {
        self.build_for(&Role::ALL, audit)
    }

    /// Builds a registry serving only `roles`, e.g. a review-only pass.
    pub fn build_for(&self, roles: &[Role], audit: bool) -> Result<BackendRegistry, BackendError> {
        let mut built: BTreeMap<&str, Arc<dyn TextBackend>> = BTreeMap::new();
        let mut builder = BackendRegistry::builder().audit(audit).require(roles);
        for &role in roles {
            let (name, spec) = self.resolve(role)?;
            let backend = match built.get(name) {
                Some(b) => b.clone(),
                None => {
                    let b = spec.build(name)?;
                    built.insert(name, b.clone());
                    b
                }
            };
            builder = builder.role(role, backend);
        }
        let mut retry = RetryPolicy::default();
        if let Some(ms) = self.retry_backoff_ms {
            retry.initial_backoff = Duration::from_millis(ms);
        }
        builder.embedder(self.embedding.build()?).retry(retry).build()
    }
}
