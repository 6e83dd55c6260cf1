//! Chat-completion client: remote or mock backend behind a shared
//! concurrency gate, bounded retries and a content-addressed disk cache.

mod cache;
mod mock;
mod template;
mod transport;

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::DiskCache;
pub use mock::{MarkerRule, MockRules, MockTransport};
pub use template::{PromptTemplate, TemplateName};
pub use transport::{
    parse_completion, HttpTransport, Transport, TransportFailure, WireMessage, WireRequest,
};

use crate::error::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::Request("no messages".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::Request(format!(
                "temperature {} is not >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Request("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn to_wire(&self, model: &str) -> WireRequest {
        let mut messages = Vec::with_capacity(self.messages.len() + 1);
        if !self.system.is_empty() {
            messages.push(WireMessage {
                role: "system".into(),
                content: self.system.clone(),
            });
        }
        messages.extend(self.messages.iter().map(|m| WireMessage {
            role: m.role.as_str().into(),
            content: m.content.clone(),
        }));
        WireRequest {
            model: model.to_string(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

/// Lowercase hex SHA-256 over the serialized wire request (model included).
pub fn cache_key(request: &ChatRequest, model: &str) -> String {
    let body = serde_json::to_vec(&request.to_wire(model)).expect("request serializes");
    hex::encode(Sha256::digest(&body))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Exponential: base, 2·base, 4·base, ...
    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        let shift = failed_attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1 << shift))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub max_concurrent: usize,
    pub retry: RetryPolicy,
    pub cache_dir: Option<PathBuf>,
    pub timeout_secs: u64,
    pub mock_rules: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            model: "mock".into(),
            token_env: None,
            max_concurrent: 4,
            retry: RetryPolicy::default(),
            cache_dir: None,
            timeout_secs: 120,
            mock_rules: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_concurrent == 0 {
            return Err(LlmError::Config("max_concurrent must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(LlmError::Config(
                "retry.max_attempts must be positive".into(),
            ));
        }
        if self.kind == BackendKind::Remote {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(LlmError::Config(
                    "remote backend requires an endpoint".into(),
                ));
            }
            if self.model.is_empty() {
                return Err(LlmError::Config("remote backend requires a model".into()));
            }
        }
        Ok(())
    }
}

/// Counting gate bounding in-flight requests.
#[derive(Debug)]
struct Gate {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Gate {
            limit,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("gate poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("gate poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("gate poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cached: bool,
    pub attempts: u32,
}

/// Thread-safe; share one client across callers.
pub struct LlmClient {
    cfg: BackendConfig,
    transport: Arc<dyn Transport>,
    cache: Option<DiskCache>,
    gate: Gate,
}

impl LlmClient {
    /// Builds the transport named by `cfg.kind`.
    pub fn from_config(cfg: BackendConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let transport: Arc<dyn Transport> = match cfg.kind {
            BackendKind::Mock => {
                let rules = match &cfg.mock_rules {
                    Some(path) => MockRules::load(path).map_err(LlmError::Config)?,
                    None => MockRules::default(),
                };
                Arc::new(MockTransport::new(rules))
            }
            BackendKind::Remote => {
                let token = match &cfg.token_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        LlmError::Config(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                let endpoint = cfg.endpoint.clone().unwrap_or_default();
                Arc::new(
                    HttpTransport::new(endpoint, token, Duration::from_secs(cfg.timeout_secs))
                        .map_err(LlmError::Config)?,
                )
            }
        };
        Self::with_transport(cfg, transport)
    }

    pub fn with_transport(
        cfg: BackendConfig,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, LlmError> {
        cfg.validate()?;
        let cache = cfg.cache_dir.as_ref().map(DiskCache::open).transpose()?;
        Ok(LlmClient {
            gate: Gate::new(cfg.max_concurrent),
            cfg,
            transport,
            cache,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn model(&self) -> &str {
        &self.cfg.model
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        self.complete_traced(req).map(|c| c.text)
    }

    pub fn complete_traced(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        req.validate()?;
        let key = cache_key(req, &self.cfg.model);
        if let Some(cache) = &self.cache {
            match cache.get(&key) {
                Ok(Some(text)) => {
                    return Ok(Completion {
                        text,
                        cached: true,
                        attempts: 0,
                    })
                }
                Ok(None) => {}
                Err(e) => log::warn!("{e}; refetching"),
            }
        }
        let wire = req.to_wire(&self.cfg.model);
        let (text, attempts) = self.fetch_with_retry(&wire)?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &text)?;
        }
        Ok(Completion {
            text,
            cached: false,
            attempts,
        })
    }

    fn fetch_with_retry(&self, wire: &WireRequest) -> Result<(String, u32), LlmError> {
        let policy = &self.cfg.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.gate.acquire();
                self.transport.send(wire)
            };
            let failure = match result {
                Ok(text) => return Ok((text, attempt)),
                Err(f) => f,
            };
            if !failure.is_retryable() || attempt >= policy.max_attempts {
                return Err(match failure {
                    TransportFailure::Network(message) => LlmError::Transport {
                        attempts: attempt,
                        message,
                    },
                    TransportFailure::Status { status, body } => LlmError::Api { status, body },
                });
            }
            log::debug!("attempt {attempt} failed ({failure:?}); retrying");
            std::thread::sleep(policy.backoff(attempt));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn request(text: &str) -> ChatRequest {
        ChatRequest {
            system: "sys".into(),
            messages: vec![ChatMessage::user(text)],
            temperature: 0.0,
            max_tokens: 32,
        }
    }

    /// Fails `failures` times with a network error, then echoes.
    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
    }

    impl Transport for Flaky {
        fn send(&self, r: &WireRequest) -> Result<String, TransportFailure> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(TransportFailure::Network(format!("reset #{n}")))
            } else {
                Ok(r.messages.last().unwrap().content.clone())
            }
        }
    }

    fn remote_cfg(max_attempts: u32) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Remote,
            endpoint: Some("http://127.0.0.1:9/v1/chat/completions".into()),
            model: "m".into(),
            retry: RetryPolicy {
                max_attempts,
                backoff_base_ms: 0,
            },
            ..BackendConfig::default()
        }
    }

    #[test]
    fn retries_transient_failures() {
        let t = Arc::new(Flaky {
            failures: 2,
            calls: AtomicUsize::new(0),
        });
        let client = LlmClient::with_transport(remote_cfg(3), t.clone()).unwrap();
        let c = client.complete_traced(&request("hi")).unwrap();
        assert_eq!(c.text, "hi");
        assert_eq!(c.attempts, 3);
    }

    #[test]
    fn exhaustion_is_a_transport_error() {
        let t = Arc::new(Flaky {
            failures: 4,
            calls: AtomicUsize::new(0),
        });
        let client = LlmClient::with_transport(remote_cfg(3), t.clone()).unwrap();
        let err = client.complete(&request("hi")).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 3, .. }));
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        struct Denied(AtomicUsize);
        impl Transport for Denied {
            fn send(&self, _: &WireRequest) -> Result<String, TransportFailure> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Err(TransportFailure::Status {
                    status: 401,
                    body: "no".into(),
                })
            }
        }
        let t = Arc::new(Denied(AtomicUsize::new(0)));
        let client = LlmClient::with_transport(remote_cfg(5), t.clone()).unwrap();
        let err = client.complete(&request("hi")).unwrap_err();
        assert!(matches!(err, LlmError::Api { status: 401, .. }));
        assert_eq!(t.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn remote_requires_endpoint() {
        let cfg = BackendConfig {
            endpoint: None,
            ..remote_cfg(1)
        };
        assert!(matches!(cfg.validate(), Err(LlmError::Config(_))));
        let mock = BackendConfig {
            endpoint: None,
            model: String::new(),
            ..BackendConfig::default()
        };
        mock.validate().unwrap();
    }

    #[test]
    fn invalid_requests_rejected() {
        let mut r = request("x");
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = request("x");
        r.temperature = -0.5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn cache_key_covers_temperature_and_model() {
        let a = request("x");
        let mut b = a.clone();
        b.temperature = 0.7;
        assert_ne!(cache_key(&a, "m"), cache_key(&b, "m"));
        assert_ne!(cache_key(&a, "m"), cache_key(&a, "n"));
        let k = cache_key(&a, "m");
        assert_eq!(k.len(), 64);
        assert!(k
            .chars()
            .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 100,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(3), Duration::from_millis(400));
    }
}
