//! Text generation and embedding backends.
//!
//! Every pipeline role talks to a [`TextBackend`] through a [`BackendRegistry`],
//! which enforces declared capabilities, retries transient failures and can
//! keep an audit trail of every call it routes.

pub mod config;
pub mod mock;
pub mod openai;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::EmbeddingVector;

/// Routing key for generation requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Wake,
    Dream,
    Judge,
    Rewake,
    Review,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Wake, Role::Dream, Role::Judge, Role::Rewake, Role::Review];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Wake => "wake",
            Role::Dream => "dream",
            Role::Judge => "judge",
            Role::Rewake => "rewake",
            Role::Review => "review",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    /// `None` for unseeded calls.
    pub seed: Option<u64>,
    /// Output budget hint forwarded to the backend (tokens for HTTP backends).
    pub max_output: Option<u32>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub max_temperature: f64,
    pub supports_seed: bool,
    pub model_name: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("temperature {requested} exceeds {model}'s maximum {max}")]
    Capability { requested: f64, max: f64, model: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("could not decode backend response: {0}")]
    Decode(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("embedding dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait TextBackend: Send + Sync {
    fn capabilities(&self) -> &BackendCapabilities;

    /// Performs one completion with no retries and no capability checks.
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn model_name(&self) -> &str;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after a retryable transport failure.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    /// Extra attempts after an empty completion.
    pub max_empty_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            max_empty_retries: 2,
        }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        Self {
            initial_backoff: Duration::ZERO,
            ..Self::default()
        }
    }
}

/// Checks `request` against the backend's capabilities and runs it with retries.
pub fn generate(
    backend: &dyn TextBackend,
    request: &GenerationRequest,
    policy: &RetryPolicy,
) -> Result<String, BackendError> {
    let caps = backend.capabilities();
    if !(request.temperature.is_finite() && request.temperature >= 0.0) {
        return Err(BackendError::InvalidRequest(format!(
            "temperature must be non-negative, got {}",
            request.temperature
        )));
    }
    if request.temperature > caps.max_temperature {
        return Err(BackendError::Capability {
            requested: request.temperature,
            max: caps.max_temperature,
            model: caps.model_name.clone(),
        });
    }
    if request.prompt.trim().is_empty() {
        return Err(BackendError::InvalidRequest("empty prompt".into()));
    }

    let mut transport_failures = 0;
    let mut empty_replies = 0;
    let mut backoff = policy.initial_backoff;
    loop {
        match backend.complete(request) {
            Ok(text) if !text.trim().is_empty() => return Ok(text),
            Ok(_) => {
                empty_replies += 1;
                if empty_replies > policy.max_empty_retries {
                    return Err(BackendError::EmptyCompletion);
                }
            }
            Err(e) if e.is_retryable() => {
                transport_failures += 1;
                if transport_failures > policy.max_retries {
                    return Err(e);
                }
                log::debug!("{} retry {transport_failures} after: {e}", caps.model_name);
                if !backoff.is_zero() {
                    std::thread::sleep(backoff);
                }
                backoff *= 2;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Embeds non-empty `text`, checking that the result is finite.
pub fn embed(backend: &dyn EmbeddingBackend, text: &str) -> Result<EmbeddingVector, BackendError> {
    if text.trim().is_empty() {
        return Err(BackendError::InvalidRequest("cannot embed empty text".into()));
    }
    let values = backend.embed_text(text)?;
    EmbeddingVector::new(values).map_err(|e| BackendError::Decode(e.to_string()))
}

/// One routed generation call, as seen by the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub role: Role,
    pub model_name: String,
    pub request: GenerationRequest,
    pub ok: bool,
}

/// Role to backend mapping plus the shared embedding backend.
#[derive(Clone)]
pub struct BackendRegistry {
    generators: BTreeMap<Role, Arc<dyn TextBackend>>,
    embedder: Arc<dyn EmbeddingBackend>,
    retry: RetryPolicy,
    audit: Option<Arc<Mutex<Vec<CallRecord>>>>,
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let roles: BTreeMap<Role, &str> = self
            .generators
            .iter()
            .map(|(r, b)| (*r, b.capabilities().model_name.as_str()))
            .collect();
        f.debug_struct("BackendRegistry")
            .field("roles", &roles)
            .field("embedder", &self.embedder.model_name())
            .field("retry", &self.retry)
            .finish()
    }
}

impl BackendRegistry {
    pub fn builder() -> RegistryBuilder {
        RegistryBuilder::default()
    }

    pub fn backend(&self, role: Role) -> Result<&Arc<dyn TextBackend>, BackendError> {
        self.generators
            .get(&role)
            .ok_or_else(|| BackendError::Config(format!("no backend configured for role {role}")))
    }

    /// Declared capabilities of the backend serving `role`.
    pub fn probe_capabilities(&self, role: Role) -> Result<BackendCapabilities, BackendError> {
        Ok(self.backend(role)?.capabilities().clone())
    }

    pub fn embedder(&self) -> &dyn EmbeddingBackend {
        self.embedder.as_ref()
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let backend = self.backend(request.role)?;
        let result = generate(backend.as_ref(), request, &self.retry);
        if let Some(audit) = &self.audit {
            audit.lock().expect("audit lock").push(CallRecord {
                role: request.role,
                model_name: backend.capabilities().model_name.clone(),
                request: request.clone(),
                ok: result.is_ok(),
            });
        }
        result
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        embed(self.embedder.as_ref(), text)
    }

    /// Calls routed so far; empty unless built with auditing.
    pub fn audit_log(&self) -> Vec<CallRecord> {
        self.audit
            .as_ref()
            .map(|a| a.lock().expect("audit lock").clone())
            .unwrap_or_default()
    }

    /// Copy of this registry with `role` served by `backend`. Shares the audit trail.
    pub fn with_role(&self, role: Role, backend: Arc<dyn TextBackend>) -> Self {
        let mut next = self.clone();
        next.generators.insert(role, backend);
        next
    }
}

#[derive(Default)]
pub struct RegistryBuilder {
    generators: BTreeMap<Role, Arc<dyn TextBackend>>,
    embedder: Option<Arc<dyn EmbeddingBackend>>,
    retry: Option<RetryPolicy>,
    audit: bool,
    required: Option<Vec<Role>>,
}

impl RegistryBuilder {
    pub fn role(mut self, role: Role, backend: Arc<dyn TextBackend>) -> Self {
        self.generators.insert(role, backend);
        self
    }

    /// Maps every role not yet mapped to `backend`.
    pub fn all_roles(mut self, backend: Arc<dyn TextBackend>) -> Self {
        for role in Role::ALL {
            self.generators.entry(role).or_insert_with(|| backend.clone());
        }
        self
    }

    pub fn embedder(mut self, embedder: Arc<dyn EmbeddingBackend>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn retry(mut self, policy: RetryPolicy) -> Self {
        self.retry = Some(policy);
        self
    }

    pub fn audit(mut self, enabled: bool) -> Self {
        self.audit = enabled;
        self
    }

    /// Roles that must be configured; all of them unless narrowed here.
    pub fn require(mut self, roles: &[Role]) -> Self {
        self.required = Some(roles.to_vec());
        self
    }

    pub fn build(self) -> Result<BackendRegistry, BackendError> {
        let missing: Vec<String> = self
            .required
            .as_deref()
            .unwrap_or(&Role::ALL)
            .iter()
            .filter(|r| !self.generators.contains_key(r))
            .map(Role::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(BackendError::Config(format!(
                "no backend configured for role(s): {}",
                missing.join(", ")
            )));
        }
        for backend in self.generators.values() {
            let caps = backend.capabilities();
            if !(caps.max_temperature > 0.0) {
                return Err(BackendError::Config(format!(
                    "{}: max_temperature must be positive",
                    caps.model_name
                )));
            }
        }
        let embedder = self
            .embedder
            .ok_or_else(|| BackendError::Config("no embedding backend configured".into()))?;
        Ok(BackendRegistry {
            generators: self.generators,
            embedder,
            retry: self.retry.unwrap_or_default(),
            audit: self.audit.then(|| Arc::new(Mutex::new(Vec::new()))),
        })
    }
}
