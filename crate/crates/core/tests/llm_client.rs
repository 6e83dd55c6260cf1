use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use persona_core::llm::{
    cache_key, BackendConfig, BackendKind, ChatMessage, ChatRequest, LlmClient, RetryPolicy,
    Transport, TransportFailure, WireRequest,
};

fn request(text: &str) -> ChatRequest {
    ChatRequest {
        system: "sys".into(),
        messages: vec![ChatMessage::user(text)],
        temperature: 0.0,
        max_tokens: 16,
    }
}

fn cfg(cache: Option<&std::path::Path>, max_concurrent: usize) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Remote,
        endpoint: Some("http://127.0.0.1:9/unused".into()),
        model: "m".into(),
        max_concurrent,
        retry: RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 1,
        },
        cache_dir: cache.map(Into::into),
        ..BackendConfig::default()
    }
}

/// Echoes the last message after a short pause, tracking peak concurrency.
#[derive(Default)]
struct Slow {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl Transport for Slow {
    fn send(&self, r: &WireRequest) -> Result<String, TransportFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(15));
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(format!("echo {}", r.messages.last().unwrap().content))
    }
}

#[test]
fn gate_bounds_in_flight_requests() {
    let transport = Arc::new(Slow::default());
    let client = Arc::new(LlmClient::with_transport(cfg(None, 2), transport.clone()).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let c = client.clone();
            thread::spawn(move || c.complete(&request(&format!("q{i}"))).unwrap())
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        assert_eq!(h.join().unwrap(), format!("echo q{i}"));
    }
    assert_eq!(transport.calls.load(Ordering::SeqCst), 8);
    assert!(transport.peak.load(Ordering::SeqCst) <= 2);
}

#[test]
fn cache_survives_client_restart() {
    let dir = tempfile::tempdir().unwrap();
    let first = Arc::new(Slow::default());
    let a = LlmClient::with_transport(cfg(Some(dir.path()), 4), first.clone()).unwrap();
    let reply = a.complete_traced(&request("hello")).unwrap();
    assert!(!reply.cached);
    assert_eq!(reply.attempts, 1);

    let second = Arc::new(Slow::default());
    let b = LlmClient::with_transport(cfg(Some(dir.path()), 4), second.clone()).unwrap();
    let again = b.complete_traced(&request("hello")).unwrap();
    assert!(again.cached);
    assert_eq!(again.text, reply.text);
    assert_eq!(second.calls.load(Ordering::SeqCst), 0);

    // a different temperature is a different request
    let mut warm = request("hello");
    warm.temperature = 0.7;
    assert!(!b.complete_traced(&warm).unwrap().cached);
}

#[test]
fn corrupt_cache_entry_is_refetched_and_repaired() {
    let dir = tempfile::tempdir().unwrap();
    let req = request("hello");
    let path = dir.path().join(format!("{}.json", cache_key(&req, "m")));
    fs::write(&path, b"{not json").unwrap();

    let transport = Arc::new(Slow::default());
    let client = LlmClient::with_transport(cfg(Some(dir.path()), 1), transport.clone()).unwrap();
    let c = client.complete_traced(&req).unwrap();
    assert!(!c.cached);
    assert_eq!(c.text, "echo hello");
    assert!(client.complete_traced(&req).unwrap().cached);
    assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
}

/// 503 twice, then success.
struct Overloaded(AtomicUsize);

impl Transport for Overloaded {
    fn send(&self, _: &WireRequest) -> Result<String, TransportFailure> {
        match self.0.fetch_add(1, Ordering::SeqCst) {
            0 | 1 => Err(TransportFailure::Status {
                status: 503,
                body: "busy".into(),
            }),
            _ => Ok("fine".into()),
        }
    }
}

#[test]
fn server_errors_are_retried_within_budget() {
    let client =
        LlmClient::with_transport(cfg(None, 1), Arc::new(Overloaded(AtomicUsize::new(0)))).unwrap();
    let c = client.complete_traced(&request("x")).unwrap();
    assert_eq!((c.text.as_str(), c.attempts), ("fine", 3));

    let mut tight = cfg(None, 1);
    tight.retry.max_attempts = 2;
    let client =
        LlmClient::with_transport(tight, Arc::new(Overloaded(AtomicUsize::new(0)))).unwrap();
    let err = client.complete(&request("x")).unwrap_err();
    assert!(err.to_string().contains("503"), "{err}");
}
