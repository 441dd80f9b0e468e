//! Chat-completion execution: an OpenAI-compatible HTTP client, a deterministic
//! mock, a resumable JSON-lines response cache, and the bounded-parallel
//! batch runner.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{self, Attempt, RetryPolicy, Transport, TransportError};
use crate::lexicon::{self, GenderLexicon};
use crate::promptgen::{Condition, PromptJob};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("cache I/O on {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache line {line} in {path}: {message}")]
    CacheCorrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    Live,
    Mock,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub job_id: String,
    pub essay_id: String,
    pub condition: Condition,
    pub model_id: String,
    pub response_text: String,
    pub created_at: DateTime<Utc>,
    pub attempt_count: u32,
    pub source: ResponseSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Omitted from the request when unset so the provider default applies.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_base_delay_ms")]
    pub base_delay_ms: u64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

fn default_timeout_secs() -> f64 {
    120.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_base_delay_ms() -> u64 {
    500
}

impl ModelEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            temperature: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            api_key_env: None,
            base_delay_ms: default_base_delay_ms(),
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(LlmError::Config("timeout must be positive".into()));
        }
        if self.max_retries > http::MAX_RETRIES_LIMIT {
            return Err(LlmError::Config(format!(
                "max_retries {} exceeds {}",
                self.max_retries,
                http::MAX_RETRIES_LIMIT
            )));
        }
        if self.base_url.is_empty() {
            return Err(LlmError::Config("base_url is empty".into()));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay_ms: self.base_delay_ms,
            max_delay_ms: 60_000,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// Anything that turns a prompt job into a feedback record.
pub trait Completer: Send + Sync {
    fn complete(&self, job: &PromptJob) -> Result<FeedbackRecord, LlmError>;
}

pub struct HttpCompleter {
    cfg: ModelEndpointConfig,
    transport: Arc<dyn Transport>,
    bearer: Option<String>,
}

impl HttpCompleter {
    pub fn new(cfg: ModelEndpointConfig, transport: Arc<dyn Transport>) -> Result<Self, LlmError> {
        cfg.validate()?;
        let bearer = http::resolve_secret(cfg.api_key_env.as_deref())?;
        Ok(Self {
            cfg,
            transport,
            bearer,
        })
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": prompt }],
        });
        if let Some(t) = self.cfg.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = self.cfg.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }
}

fn first_choice_content(body: &str) -> Result<String, TransportError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| TransportError::InvalidResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| TransportError::InvalidResponse("missing choices[0].message.content".into()))
}

impl Completer for HttpCompleter {
    fn complete(&self, job: &PromptJob) -> Result<FeedbackRecord, LlmError> {
        let url = http::join_url(&self.cfg.base_url, "chat/completions");
        let body = self.request_body(&job.rendered_prompt);
        let (text, attempts) = http::retry(&self.cfg.retry_policy(), |_| {
            let reply = match self.transport.post_json(
                &url,
                self.bearer.as_deref(),
                &body,
                self.cfg.timeout(),
            ) {
                Ok(r) => r,
                Err(e) => {
                    return Attempt::Retry {
                        error: e,
                        after: None,
                    }
                }
            };
            match http::classify_reply(reply) {
                Attempt::Done(body) => match first_choice_content(&body) {
                    Ok(text) if !text.trim().is_empty() => Attempt::Done(text),
                    Ok(_) => Attempt::Retry {
                        error: TransportError::InvalidResponse("empty completion".into()),
                        after: None,
                    },
                    Err(e) => Attempt::Fatal(e),
                },
                Attempt::Retry { error, after } => Attempt::Retry { error, after },
                Attempt::Fatal(e) => Attempt::Fatal(e),
            }
        })?;
        Ok(FeedbackRecord {
            job_id: job.job_id.clone(),
            essay_id: job.essay_id.clone(),
            condition: job.condition,
            model_id: job.model_id.clone(),
            response_text: text,
            created_at: Utc::now(),
            attempt_count: attempts,
            source: ResponseSource::Live,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    Biased,
    Unbiased,
}

const OPENERS: &[&str] = &[
    "Thank you for sharing this essay.",
    "This essay takes a clear position on the topic.",
    "You have written a thoughtful response to the prompt.",
    "This is an engaging piece of argumentative writing.",
];
const STRENGTHS: &[&str] = &[
    "The introduction states the main claim directly and the examples are relevant.",
    "The argument is easy to follow and the personal examples make it concrete.",
    "The writing shows real engagement with the question and a consistent point of view.",
    "The essay uses everyday situations to illustrate the central argument.",
];
const IMPROVEMENTS: &[&str] = &[
    "The body paragraphs would benefit from clearer transitions between ideas.",
    "Several sentences are long and could be split to improve readability.",
    "The conclusion restates the claim but could say more about why it matters.",
    "Some spelling and punctuation errors distract from the argument.",
];
const CLOSERS: &[&str] = &[
    "Overall, this is a solid draft with a strong foundation.",
    "Keep developing these ideas in the next revision.",
    "With some revision this essay will be even more persuasive.",
];

/// Autonomy-supportive block attached for male-direction cues in biased mode.
pub const AUTONOMY_BLOCK: &str = "You could explore additional evidence that interests you. \
Feel free to experiment with the structure in your own way. \
Perhaps consider which counterargument you find most convincing. \
You might want to expand the conclusion in your own voice.";

/// Controlling block attached for female-direction cues in biased mode.
pub const CONTROLLING_BLOCK: &str = "You must correct every grammar error before resubmitting. \
Make sure each paragraph begins with a topic sentence. \
Avoid informal words and phrases. \
You need to follow the assignment instructions exactly. \
Do not write run-on sentences.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenderCue {
    Male,
    Female,
    None,
}

/// Gender cue the biased mock reacts to: the condition for explicit prompts,
/// lexical dominance in the prompt otherwise.
pub fn detect_cue(job: &PromptJob, lexicon: &GenderLexicon) -> GenderCue {
    match job.condition {
        Condition::ExplicitM => GenderCue::Male,
        Condition::ExplicitF => GenderCue::Female,
        Condition::ExplicitN => GenderCue::None,
        _ => {
            let c = lexicon::gender_term_counts(&job.rendered_prompt, lexicon);
            match c.male.cmp(&c.female) {
                std::cmp::Ordering::Greater => GenderCue::Male,
                std::cmp::Ordering::Less => GenderCue::Female,
                std::cmp::Ordering::Equal => GenderCue::None,
            }
        }
    }
}

/// Deterministic offline stand-in for a chat model.
///
/// The base feedback depends only on the seed. In biased mode a fixed block is
/// appended according to the detected gender cue.
pub fn mock_complete(
    job: &PromptJob,
    mode: MockMode,
    seed: u64,
    lexicon: &GenderLexicon,
) -> FeedbackRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<&str> = [OPENERS, STRENGTHS, IMPROVEMENTS, CLOSERS]
        .iter()
        .map(|pool| *pool.choose(&mut rng).expect("non-empty pool"))
        .collect();
    if mode == MockMode::Biased {
        match detect_cue(job, lexicon) {
            GenderCue::Male => parts.insert(3, AUTONOMY_BLOCK),
            GenderCue::Female => parts.insert(3, CONTROLLING_BLOCK),
            GenderCue::None => {}
        }
    }
    FeedbackRecord {
        job_id: job.job_id.clone(),
        essay_id: job.essay_id.clone(),
        condition: job.condition,
        model_id: job.model_id.clone(),
        response_text: parts.join(" "),
        created_at: DateTime::<Utc>::UNIX_EPOCH,
        attempt_count: 1,
        source: ResponseSource::Mock,
    }
}

pub struct MockCompleter {
    pub mode: MockMode,
    pub seed: u64,
    pub lexicon: Arc<GenderLexicon>,
}

impl Completer for MockCompleter {
    fn complete(&self, job: &PromptJob) -> Result<FeedbackRecord, LlmError> {
        Ok(mock_complete(job, self.mode, self.seed, &self.lexicon))
    }
}

/// Append-only JSON-lines store of feedback records, one file per model,
/// indexed by job id on load.
pub struct FeedbackCache {
    dir: PathBuf,
    index: HashMap<String, FeedbackRecord>,
    writers: HashMap<String, BufWriter<File>>,
}

fn model_file_name(model_id: &str) -> String {
    let safe: String = model_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.jsonl")
}

impl FeedbackCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| LlmError::CacheIo { path, source }
        };
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let mut index = HashMap::new();
        let mut entries: Vec<_> = std::fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            let file = File::open(&path).map_err(io(&path))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io(&path))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<FeedbackRecord>(&line) {
                    Ok(rec) => {
                        index.insert(rec.job_id.clone(), rec);
                    }
                    Err(e) => {
                        return Err(LlmError::CacheCorrupt {
                            path,
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        Ok(Self {
            dir,
            index,
            writers: HashMap::new(),
        })
    }

    pub fn get(&self, job_id: &str) -> Option<&FeedbackRecord> {
        self.index.get(job_id)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn append(&mut self, record: &FeedbackRecord) -> Result<(), LlmError> {
        let path = self.dir.join(model_file_name(&record.model_id));
        let io = |source| LlmError::CacheIo {
            path: path.clone(),
            source,
        };
        if !self.writers.contains_key(&record.model_id) {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io)?;
            self.writers
                .insert(record.model_id.clone(), BufWriter::new(file));
        }
        let writer = self.writers.get_mut(&record.model_id).expect("inserted");
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(writer, "{line}").map_err(io)?;
        writer.flush().map_err(io)?;
        self.index.insert(record.job_id.clone(), record.clone());
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("plan is empty")]
    EmptyPlan,
    #[error("{} of {total} jobs failed: {}", failed.len(), failed.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(", "))]
    Partial {
        total: usize,
        /// (job_id, error message) per permanently failed job.
        failed: Vec<(String, String)>,
        /// Records that did complete, in plan order.
        completed: Vec<FeedbackRecord>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub cache_hits: usize,
    pub executed: usize,
}

/// Executes every plan job not already cached, with at most `parallelism`
/// requests in flight. Results come back in plan order; new records are
/// appended to the cache as they complete, so an interrupted run resumes
/// with only the remainder.
pub fn run_batch(
    plan: &[PromptJob],
    completer: &dyn Completer,
    cache: &mut FeedbackCache,
    parallelism: usize,
) -> Result<(Vec<FeedbackRecord>, BatchStats), BatchError> {
    if plan.is_empty() {
        return Err(BatchError::EmptyPlan);
    }
    let mut stats = BatchStats::default();
    let mut pending: Vec<&PromptJob> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for job in plan {
        if cache.get(&job.job_id).is_some() {
            stats.cache_hits += 1;
        } else if queued.insert(job.job_id.as_str()) {
            pending.push(job);
        }
    }

    let mut failures: HashMap<String, String> = HashMap::new();
    let mut executed = std::collections::HashSet::new();
    let mut write_errors = Vec::new();
    if !pending.is_empty() {
        let next = AtomicUsize::new(0);
        let workers = parallelism.max(1).min(pending.len());
        let (tx, rx) = mpsc::channel::<(String, Result<FeedbackRecord, LlmError>)>();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                let pending = &pending;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = pending.get(i) else { break };
                    let outcome = completer.complete(job);
                    if tx.send((job.job_id.clone(), outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // single writer: only this thread touches the cache
            for (job_id, outcome) in rx {
                match outcome {
                    Ok(record) => {
                        stats.executed += 1;
                        executed.insert(job_id.clone());
                        if let Err(e) = cache.append(&record) {
                            write_errors.push((job_id, e.to_string()));
                        }
                    }
                    Err(e) => {
                        log::warn!("job {job_id} failed: {e}");
                        failures.insert(job_id, e.to_string());
                    }
                }
            }
        });
    }

    let mut completed = Vec::with_capacity(plan.len());
    let mut failed = Vec::new();
    for job in plan {
        match cache.get(&job.job_id) {
            Some(rec) => {
                let mut rec = rec.clone();
                if !executed.contains(&job.job_id) {
                    rec.source = ResponseSource::Cache;
                }
                completed.push(rec);
            }
            None => failed.push((
                job.job_id.clone(),
                failures
                    .get(&job.job_id)
                    .cloned()
                    .unwrap_or_else(|| "not executed".to_string()),
            )),
        }
    }
    failed.extend(write_errors);
    if failed.is_empty() {
        Ok((completed, stats))
    } else {
        Err(BatchError::Partial {
            total: plan.len(),
            failed,
            completed,
        })
    }
}
