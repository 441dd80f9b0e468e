//! JSON-over-HTTP transport with bounded retries, shared by the chat and
//! embedding clients.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("request failed: {0}")]
    Request(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("environment variable {0} is not set")]
    MissingSecret(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<TransportError>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub retry_after: Option<Duration>,
    pub body: String,
}

/// Minimal POST-JSON abstraction; the live implementation is [`ReqwestTransport`].
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

#[derive(Debug, Clone, Default)]
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| TransportError::Request(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(parse_retry_after);
        let body = resp
            .text()
            .map_err(|e| TransportError::Request(e.to_string()))?;
        Ok(HttpReply {
            status,
            retry_after,
            body,
        })
    }
}

/// Delay-seconds form of `Retry-After`; HTTP dates are ignored.
pub fn parse_retry_after(value: &str) -> Option<Duration> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt; at most 10.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

pub const MAX_RETRIES_LIMIT: u32 = 10;

impl RetryPolicy {
    /// Exponential backoff with full jitter in `[delay/2, delay]`.
    pub fn backoff(&self, retry: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_delay_ms);
        if exp == 0 {
            return Duration::ZERO;
        }
        let jittered = rand::rng().random_range(exp / 2..=exp);
        Duration::from_millis(jittered)
    }
}

/// Outcome of one attempt inside [`retry`].
pub enum Attempt<T> {
    Done(T),
    Retry {
        error: TransportError,
        after: Option<Duration>,
    },
    Fatal(TransportError),
}

/// Runs `op` until it succeeds, fails fatally, or the retry budget is spent.
/// Returns the value and the number of attempts made.
pub fn retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Attempt<T>,
) -> Result<(T, u32), TransportError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op(attempt) {
            Attempt::Done(v) => return Ok((v, attempt)),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry { error, after } => {
                if attempt > policy.max_retries {
                    return Err(TransportError::Exhausted {
                        attempts: attempt,
                        last: Box::new(error),
                    });
                }
                let wait = after.unwrap_or_else(|| policy.backoff(attempt - 1));
                log::debug!("attempt {attempt} failed ({error}); retrying in {wait:?}");
                std::thread::sleep(wait.min(Duration::from_millis(policy.max_delay_ms.max(1))));
            }
        }
    }
}

/// Classifies an HTTP reply: 2xx passes through, 408/409/429/5xx retry, other
/// statuses are fatal.
pub fn classify_reply(reply: HttpReply) -> Attempt<String> {
    match reply.status {
        200..=299 => Attempt::Done(reply.body),
        408 | 409 | 429 | 500..=599 => Attempt::Retry {
            after: reply.retry_after,
            error: TransportError::Status {
                status: reply.status,
                body: truncate(&reply.body, 200),
            },
        },
        status => Attempt::Fatal(TransportError::Status {
            status,
            body: truncate(&reply.body, 200),
        }),
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

pub fn resolve_secret(env_var: Option<&str>) -> Result<Option<String>, TransportError> {
    match env_var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| TransportError::MissingSecret(name.to_string())),
    }
}

pub fn join_url(base: &str, path: &str) -> String {
    format!(
        "{}/{}",
        base.trim_end_matches('/'),
        path.trim_start_matches('/')
    )
}
