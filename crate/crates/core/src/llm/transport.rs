//! Wire format and the transports that carry it.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

/// Chat-completion request body: `{model, messages, temperature, max_tokens}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    /// Connection-level failure; always retryable.
    Network(String),
    /// The server answered with a non-success status.
    Status { status: u16, body: String },
}

impl TransportFailure {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportFailure::Network(_) => true,
            TransportFailure::Status { status, .. } => *status == 429 || *status >= 500,
        }
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &WireRequest) -> Result<String, TransportFailure>;
}

/// Blocking HTTP transport speaking the common chat-completion JSON shape.
pub struct HttpTransport {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(
        endpoint: impl Into<String>,
        token: Option<String>,
        timeout: Duration,
    ) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(HttpTransport {
            endpoint: endpoint.into(),
            token,
            client,
        })
    }
}

/// Pulls the assistant text out of a chat-completion response body.
pub fn parse_completion(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl Transport for HttpTransport {
    fn send(&self, request: &WireRequest) -> Result<String, TransportFailure> {
        let mut builder = self.client.post(&self.endpoint).json(request);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let resp = builder
            .send()
            .map_err(|e| TransportFailure::Network(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| TransportFailure::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportFailure::Status {
                status: status.as_u16(),
                body,
            });
        }
        parse_completion(&body).ok_or(TransportFailure::Status {
            status: status.as_u16(),
            body,
        })
    }
}
