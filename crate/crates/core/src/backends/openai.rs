//! OpenAI-compatible HTTP backends (`/v1/chat/completions`, `/v1/embeddings`).
//!
//! Works against llama.cpp's server as well as hosted APIs. Requests are
//! blocking and consumed whole; no streaming.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use super::{BackendCapabilities, BackendError, EmbeddingBackend, GenerationRequest, TextBackend};

/// Joins `path` onto `base`, inserting `/v1` unless the base already ends with it.
pub fn endpoint_url(base: &str, path: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with("/v1") {
        format!("{base}{path}")
    } else {
        format!("{base}/v1{path}")
    }
}

fn http_client(timeout: Duration) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::Config(format!("http client: {e}")))
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    stream: bool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: Option<String>,
}

#[derive(Debug)]
pub struct OpenAiChatBackend {
    client: Client,
    url: String,
    model: String,
    api_key: Option<String>,
    caps: BackendCapabilities,
}

impl OpenAiChatBackend {
    pub fn new(
        endpoint: &str,
        caps: BackendCapabilities,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            client: http_client(timeout)?,
            url: endpoint_url(endpoint, "/chat/completions"),
            model: caps.model_name.clone(),
            api_key,
            caps,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn send<T: Serialize + ?Sized>(
    client: &Client,
    url: &str,
    api_key: Option<&str>,
    body: &T,
) -> Result<String, BackendError> {
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
    let status = resp.status();
    let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(BackendError::Status {
            status: status.as_u16(),
            body: text,
        });
    }
    Ok(text)
}

impl TextBackend for OpenAiChatBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            seed: request.seed.filter(|_| self.caps.supports_seed),
            max_tokens: request.max_output,
            stream: false,
        };
        let text = send(&self.client, &self.url, self.api_key.as_deref(), &body)?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Decode(format!("{e}: {text}")))?;
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

#[derive(Debug)]
pub struct OpenAiEmbeddingBackend {
    client: Client,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl OpenAiEmbeddingBackend {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        Ok(Self {
            client: http_client(timeout)?,
            url: endpoint_url(endpoint, "/embeddings"),
            model: model.to_string(),
            api_key,
        })
    }
}

impl EmbeddingBackend for OpenAiEmbeddingBackend {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let body = EmbeddingRequest {
            model: &self.model,
            input: text,
        };
        let raw = send(&self.client, &self.url, self.api_key.as_deref(), &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| BackendError::Decode(format!("{e}: {raw}")))?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| BackendError::Decode("embedding response has no data".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{generate, RetryPolicy, Role};
    use std::sync::mpsc;
    use std::thread;

    struct Seen {
        url: String,
        auth: Option<String>,
        body: serde_json::Value,
    }

    /// Serves `replies` in order, one request each, and reports what it saw.
    fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>, thread::JoinHandle<()>) {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", server.server_addr().to_ip().unwrap());
        let (tx, rx) = mpsc::channel();
        let handle = thread::spawn(move || {
            for (status, body) in replies {
                let mut req = server.recv().unwrap();
                let mut raw = String::new();
                req.as_reader().read_to_string(&mut raw).unwrap();
                let auth = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Authorization"))
                    .map(|h| h.value.to_string());
                tx.send(Seen {
                    url: req.url().to_string(),
                    auth,
                    body: serde_json::from_str(&raw).unwrap_or(serde_json::Value::Null),
                })
                .unwrap();
                let resp = tiny_http::Response::from_string(body).with_status_code(status);
                req.respond(resp).unwrap();
            }
        });
        (addr, rx, handle)
    }

    fn caps(seed: bool) -> BackendCapabilities {
        BackendCapabilities {
            max_temperature: 10.0,
            supports_seed: seed,
            model_name: "gemma".into(),
        }
    }

    fn chat_reply(content: &str) -> String {
        serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string()
    }

    #[test]
    fn url_joining() {
        assert_eq!(endpoint_url("http://h:8080", "/embeddings"), "http://h:8080/v1/embeddings");
        assert_eq!(endpoint_url("http://h/v1/", "/chat/completions"), "http://h/v1/chat/completions");
    }

    #[test]
    fn chat_request_carries_sampling_parameters() {
        let (addr, rx, handle) = serve(vec![(200, chat_reply("hello"))]);
        let b = OpenAiChatBackend::new(&addr, caps(true), Some("sk-test".into()), Duration::from_secs(5)).unwrap();
        let req = GenerationRequest {
            prompt: "Compare a and b within 75 words.".into(),
            temperature: 10.0,
            seed: Some(4),
            max_output: Some(512),
            role: Role::Dream,
        };
        assert_eq!(b.complete(&req).unwrap(), "hello");
        let seen = rx.recv().unwrap();
        handle.join().unwrap();
        assert_eq!(seen.url, "/v1/chat/completions");
        assert_eq!(seen.auth.as_deref(), Some("Bearer sk-test"));
        assert_eq!(seen.body["model"], "gemma");
        assert_eq!(seen.body["temperature"], 10.0);
        assert_eq!(seen.body["seed"], 4);
        assert_eq!(seen.body["max_tokens"], 512);
        assert_eq!(seen.body["stream"], false);
        assert_eq!(seen.body["messages"][0]["content"], "Compare a and b within 75 words.");
    }

    #[test]
    fn seed_omitted_when_unsupported() {
        let (addr, rx, handle) = serve(vec![(200, chat_reply("x"))]);
        let b = OpenAiChatBackend::new(&addr, caps(false), None, Duration::from_secs(5)).unwrap();
        let req = GenerationRequest {
            prompt: "p".into(),
            temperature: 0.0,
            seed: Some(1),
            max_output: None,
            role: Role::Review,
        };
        b.complete(&req).unwrap();
        let seen = rx.recv().unwrap();
        handle.join().unwrap();
        assert!(seen.body.get("seed").is_none());
        assert!(seen.body.get("max_tokens").is_none());
        assert!(seen.auth.is_none());
    }

    #[test]
    fn server_errors_are_retried_then_succeed() {
        let (addr, _rx, handle) = serve(vec![(503, "busy".into()), (200, chat_reply("done"))]);
        let b = OpenAiChatBackend::new(&addr, caps(true), None, Duration::from_secs(5)).unwrap();
        let req = GenerationRequest {
            prompt: "p".into(),
            temperature: 1.0,
            seed: Some(0),
            max_output: None,
            role: Role::Wake,
        };
        assert_eq!(generate(&b, &req, &RetryPolicy::immediate()).unwrap(), "done");
        handle.join().unwrap();
    }

    #[test]
    fn bad_request_surfaces_status() {
        let (addr, _rx, handle) = serve(vec![(400, "{\"error\":{\"message\":\"bad\"}}".into())]);
        let b = OpenAiChatBackend::new(&addr, caps(true), None, Duration::from_secs(5)).unwrap();
        let req = GenerationRequest {
            prompt: "p".into(),
            temperature: 1.0,
            seed: None,
            max_output: None,
            role: Role::Wake,
        };
        let err = generate(&b, &req, &RetryPolicy::immediate()).unwrap_err();
        assert!(matches!(err, BackendError::Status { status: 400, .. }));
        handle.join().unwrap();
    }

    #[test]
    fn connection_refused_is_transport_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let b = OpenAiChatBackend::new(&addr, caps(true), None, Duration::from_secs(2)).unwrap();
        let req = GenerationRequest {
            prompt: "p".into(),
            temperature: 1.0,
            seed: None,
            max_output: None,
            role: Role::Wake,
        };
        assert!(matches!(b.complete(&req), Err(BackendError::Transport(_))));
    }

    #[test]
    fn embeddings_round_trip() {
        let body = serde_json::json!({"data": [{"index": 0, "embedding": [0.5, -0.25, 1.0]}]}).to_string();
        let (addr, rx, handle) = serve(vec![(200, body)]);
        let e = OpenAiEmbeddingBackend::new(&addr, "all-MiniLM-L6-v2", None, Duration::from_secs(5)).unwrap();
        assert_eq!(e.embed_text("hello").unwrap(), vec![0.5, -0.25, 1.0]);
        let seen = rx.recv().unwrap();
        handle.join().unwrap();
        assert_eq!(seen.url, "/v1/embeddings");
        assert_eq!(seen.body["input"], "hello");
        assert_eq!(seen.body["model"], "all-MiniLM-L6-v2");
    }
}
