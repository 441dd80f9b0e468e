//! HTTP clients exercised against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use cfaudit_core::embedder::{EmbedError, Embedder, RemoteEmbedConfig, RemoteEmbedder};
use cfaudit_core::http::{ReqwestTransport, TransportError};
use cfaudit_core::llmclient::{
    self, Completer, FeedbackCache, FeedbackRecord, HttpCompleter, LlmError, ModelEndpointConfig,
    ResponseSource,
};
use cfaudit_core::promptgen::{Condition, PromptJob};

#[derive(Clone)]
struct Reply {
    status: u16,
    headers: Vec<(&'static str, String)>,
    body: String,
}

fn reply(status: u16, body: impl Into<String>) -> Reply {
    Reply {
        status,
        headers: Vec::new(),
        body: body.into(),
    }
}

struct Seen {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves `script` in order (repeating the last entry) and records requests.
struct Server {
    url: String,
    hits: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl Server {
    fn start(script: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (h, s) = (hits.clone(), seen.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let i = h.fetch_add(1, Ordering::SeqCst);
                let r = script[i.min(script.len() - 1)].clone();
                let s = s.clone();
                thread::spawn(move || handle(stream, r, &s));
            }
        });
        Self { url, hits, seen }
    }

    fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn handle(mut stream: TcpStream, r: Reply, seen: &Mutex<Vec<Seen>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    reader.read_line(&mut request_line).unwrap();
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or_default()
        .to_string();
    let (mut length, mut authorization) = (0, None);
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => length = v.trim().parse().unwrap(),
                "authorization" => authorization = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    seen.lock().unwrap().push(Seen {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
    });
    let mut head = format!(
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
        r.status,
        r.body.len()
    );
    for (k, v) in &r.headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str("\r\n");
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(r.body.as_bytes()).unwrap();
}

fn chat_ok(text: &str) -> Reply {
    reply(
        200,
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
            .to_string(),
    )
}

fn endpoint(url: &str, max_retries: u32) -> ModelEndpointConfig {
    ModelEndpointConfig {
        max_retries,
        base_delay_ms: 1,
        timeout_secs: 10.0,
        ..ModelEndpointConfig::new(url, "test-model")
    }
}

fn job(i: usize) -> PromptJob {
    PromptJob {
        job_id: format!("job{i:02}"),
        essay_id: format!("e{i:02}"),
        condition: Condition::ImplicitOriginalM,
        model_id: "test-model".into(),
        rendered_prompt: format!("Please review essay {i}."),
    }
}

#[test]
fn rate_limited_twice_then_success() {
    let limited = Reply {
        headers: vec![("Retry-After", "0".into())],
        ..reply(429, "{\"error\":\"slow down\"}")
    };
    let server = Server::start(vec![limited.clone(), limited, chat_ok("Nice work.")]);
    std::env::set_var("CFAUDIT_WIRE_TEST_KEY", "sk-test");
    let cfg = ModelEndpointConfig {
        api_key_env: Some("CFAUDIT_WIRE_TEST_KEY".into()),
        temperature: Some(0.0),
        ..endpoint(&server.url, 3)
    };
    let completer = HttpCompleter::new(cfg, Arc::new(ReqwestTransport::new())).unwrap();
    let record = completer.complete(&job(1)).unwrap();
    assert_eq!(record.response_text, "Nice work.");
    assert_eq!(record.attempt_count, 3);
    assert_eq!(record.source, ResponseSource::Live);
    assert_eq!(server.hits(), 3);

    let seen = server.seen.lock().unwrap();
    let last = seen.last().unwrap();
    assert_eq!(last.path, "/v1/chat/completions");
    assert_eq!(last.authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(last.body["model"], "test-model");
    assert_eq!(last.body["temperature"], 0.0);
    assert_eq!(
        last.body["messages"][0]["content"],
        "Please review essay 1."
    );
}

#[test]
fn server_errors_exhaust_the_retry_budget() {
    let server = Server::start(vec![reply(500, "boom")]);
    let completer =
        HttpCompleter::new(endpoint(&server.url, 2), Arc::new(ReqwestTransport::new())).unwrap();
    let err = completer.complete(&job(1)).unwrap_err();
    match err {
        LlmError::Transport(TransportError::Exhausted { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("unexpected error {other:?}"),
    }
    assert_eq!(server.hits(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = Server::start(vec![reply(400, "bad request")]);
    let completer =
        HttpCompleter::new(endpoint(&server.url, 3), Arc::new(ReqwestTransport::new())).unwrap();
    assert!(completer.complete(&job(1)).is_err());
    assert_eq!(server.hits(), 1);
}

#[test]
fn cached_jobs_skip_the_network() {
    let server = Server::start(vec![chat_ok("Fresh feedback.")]);
    let dir = tempfile::tempdir().unwrap();
    let mut cache = FeedbackCache::open(dir.path()).unwrap();
    let plan: Vec<PromptJob> = (0..10).map(job).collect();
    for j in plan.iter().step_by(3).take(4) {
        cache
            .append(&FeedbackRecord {
                job_id: j.job_id.clone(),
                essay_id: j.essay_id.clone(),
                condition: j.condition,
                model_id: j.model_id.clone(),
                response_text: "Cached feedback.".into(),
                created_at: chrono::Utc::now(),
                attempt_count: 1,
                source: ResponseSource::Live,
            })
            .unwrap();
    }
    let completer =
        HttpCompleter::new(endpoint(&server.url, 0), Arc::new(ReqwestTransport::new())).unwrap();
    let (records, stats) = llmclient::run_batch(&plan, &completer, &mut cache, 3).unwrap();
    assert_eq!(server.hits(), 6);
    assert_eq!((stats.cache_hits, stats.executed), (4, 6));
    let ids: Vec<&str> = records.iter().map(|r| r.job_id.as_str()).collect();
    let expected: Vec<String> = plan.iter().map(|j| j.job_id.clone()).collect();
    assert_eq!(ids, expected.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        records
            .iter()
            .filter(|r| r.response_text == "Cached feedback.")
            .count(),
        4
    );

    let mut reopened = FeedbackCache::open(dir.path()).unwrap();
    assert_eq!(reopened.len(), 10);
    let (_, again) = llmclient::run_batch(&plan, &completer, &mut reopened, 3).unwrap();
    assert_eq!((again.cache_hits, again.executed), (10, 0));
    assert_eq!(server.hits(), 6);
}

fn embedding_reply(values: &[f64]) -> Reply {
    reply(
        200,
        serde_json::json!({"data": [{"index": 0, "embedding": values}]}).to_string(),
    )
}

fn remote(url: &str, expected_dim: Option<usize>) -> RemoteEmbedder {
    let cfg = RemoteEmbedConfig {
        base_url: url.to_string(),
        model: "embed-test".into(),
        api_key_env: None,
        timeout_secs: 10.0,
        max_retries: 1,
        base_delay_ms: 1,
        expected_dim,
    };
    RemoteEmbedder::new(cfg, Arc::new(ReqwestTransport::new())).unwrap()
}

#[test]
fn remote_embeddings_are_used_as_returned() {
    let server = Server::start(vec![reply(503, "busy"), embedding_reply(&[3.0, 4.0, 0.0])]);
    let e = remote(&server.url, Some(3));
    let v = e.embed("Some feedback text.").unwrap();
    assert_eq!(v.values(), &[3.0, 4.0, 0.0]);
    assert!(!v.is_normalized());
    assert_eq!(server.hits(), 2);
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[1].path, "/v1/embeddings");
    assert_eq!(seen[1].body["input"], "Some feedback text.");
    assert_eq!(seen[1].body["model"], "embed-test");
}

#[test]
fn remote_dimension_is_checked() {
    let server = Server::start(vec![embedding_reply(&[1.0, 0.0])]);
    let e = remote(&server.url, Some(3072));
    assert!(matches!(
        e.embed("text").unwrap_err(),
        EmbedError::DimMismatch {
            expected: 3072,
            got: 2
        }
    ));
}
