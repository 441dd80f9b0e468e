//! Text embeddings: a remote OpenAI-compatible `/embeddings` client and an
//! offline signed feature-hashing embedder, plus a content-addressed vector
//! cache.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{self, Attempt, RetryPolicy, Transport, TransportError};
use crate::llmclient::FeedbackRecord;

/// Output dimension of the remote `text-embedding-3-large` model.
pub const REMOTE_DIM: usize = 3072;
pub const DEFAULT_MOCK_DIM: usize = 256;
pub const DEFAULT_HASH_SEED: u64 = 0x5eed_cafe_f00d_0001;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has non-finite component at index {0}")]
    NonFinite(usize),
    #[error("vector marked normalized has L2 norm {0}")]
    NotNormalized(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("records span several groups ({0} and {1})")]
    MixedGroups(String, String),
    #[error("duplicate essay id {0} within a group")]
    DuplicateEssay(String),
    #[error("cache I/O on {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt embedding cache: {0}")]
    CacheCorrupt(String),
    #[error("{} of {total} texts failed to embed: {}", failed.len(), failed.join("; "))]
    Batch { total: usize, failed: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, normalized: bool) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::DimMismatch {
                expected: 1,
                got: 0,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        if normalized {
            let norm = l2_norm(&values);
            if (norm - 1.0).abs() >= 1e-9 {
                return Err(EmbedError::NotNormalized(norm));
            }
        }
        Ok(Self { values, normalized })
    }

    /// Unchecked constructor for raw coordinates (tests, synthetic data).
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self::new(values, false).expect("finite, non-empty vector")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A labelled, essay-id-sorted set of vectors; two groups built from the same
/// essays index-match position by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEmbeddings {
    pub group_label: String,
    pub records: Vec<(String, EmbeddingVector)>,
}

impl GroupEmbeddings {
    pub fn new(
        group_label: impl Into<String>,
        mut records: Vec<(String, EmbeddingVector)>,
    ) -> Result<Self, EmbedError> {
        records.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = records.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(EmbedError::DuplicateEssay(w[0].0.clone()));
        }
        if let Some(first) = records.first() {
            let dim = first.1.dim();
            if let Some((_, v)) = records.iter().find(|(_, v)| v.dim() != dim) {
                return Err(EmbedError::DimMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
        }
        Ok(Self {
            group_label: group_label.into(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|(_, v)| v.dim())
    }

    pub fn essay_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(id, _)| id.as_str())
    }

    pub fn vectors(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.records.iter().map(|(_, v)| v)
    }

    /// Restricts to the given essay ids (used to align groups of unequal coverage).
    pub fn restricted_to(&self, ids: &HashSet<&str>) -> Self {
        Self {
            group_label: self.group_label.clone(),
            records: self
                .records
                .iter()
                .filter(|(id, _)| ids.contains(id.as_str()))
                .cloned()
                .collect(),
        }
    }
}

pub trait Embedder: Send + Sync {
    /// Identifier mixed into cache keys.
    fn model_id(&self) -> String;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// 64-bit FNV-1a, seeded by hashing the seed bytes first.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Signed feature hashing over lowercased word unigrams and bigrams,
/// L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEmbedder {
    pub dim: usize,
    pub hash_seed: u64,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_MOCK_DIM,
            hash_seed: DEFAULT_HASH_SEED,
        }
    }
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            ..Self::default()
        }
    }

    fn add_feature(&self, acc: &mut [f64], feature: &str) {
        let h = fnv1a(self.hash_seed, feature.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        acc[idx] += sign;
    }
}

impl Embedder for MockEmbedder {
    fn model_id(&self) -> String {
        format!("mock-hash-d{}-s{:x}", self.dim, self.hash_seed)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            self.add_feature(&mut acc, &format!("u:{t}"));
        }
        for w in tokens.windows(2) {
            self.add_feature(&mut acc, &format!("b:{} {}", w[0], w[1]));
        }
        let norm = l2_norm(&acc);
        if norm == 0.0 {
            // every feature cancelled out; fall back to a fixed unit axis
            acc[0] = 1.0;
        } else {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(acc, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedConfig {
    pub base_url: String,
    #[serde(default = "default_embed_model")]
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_embed_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_embed_retries")]
    pub max_retries: u32,
    #[serde(default = "default_embed_delay")]
    pub base_delay_ms: u64,
    /// Rejects vectors of any other length when set.
    #[serde(default)]
    pub expected_dim: Option<usize>,
}

fn default_embed_model() -> String {
    "text-embedding-3-large".to_string()
}
fn default_embed_timeout() -> f64 {
    60.0
}
fn default_embed_retries() -> u32 {
    3
}
fn default_embed_delay() -> u64 {
    500
}

pub struct RemoteEmbedder {
    cfg: RemoteEmbedConfig,
    transport: Arc<dyn Transport>,
    bearer: Option<String>,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedConfig, transport: Arc<dyn Transport>) -> Result<Self, EmbedError> {
        let bearer = http::resolve_secret(cfg.api_key_env.as_deref())?;
        Ok(Self {
            cfg,
            transport,
            bearer,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn model_id(&self) -> String {
        self.cfg.model.clone()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let url = http::join_url(&self.cfg.base_url, "embeddings");
        let body = json!({ "model": self.cfg.model, "input": text });
        let policy = RetryPolicy {
            max_retries: self.cfg.max_retries.min(http::MAX_RETRIES_LIMIT),
            base_delay_ms: self.cfg.base_delay_ms,
            max_delay_ms: 60_000,
        };
        let timeout = Duration::from_secs_f64(self.cfg.timeout_secs.max(0.001));
        let (values, _) = http::retry(&policy, |_| {
            let reply = match self
                .transport
                .post_json(&url, self.bearer.as_deref(), &body, timeout)
            {
                Ok(r) => r,
                Err(e) => {
                    return Attempt::Retry {
                        error: e,
                        after: None,
                    }
                }
            };
            match http::classify_reply(reply) {
                Attempt::Done(body) => match parse_embedding(&body) {
                    Ok(v) => Attempt::Done(v),
                    Err(e) => Attempt::Fatal(e),
                },
                Attempt::Retry { error, after } => Attempt::Retry { error, after },
                Attempt::Fatal(e) => Attempt::Fatal(e),
            }
        })?;
        if let Some(expected) = self.cfg.expected_dim {
            if values.len() != expected {
                return Err(EmbedError::DimMismatch {
                    expected,
                    got: values.len(),
                });
            }
        }
        EmbeddingVector::new(values, false)
    }
}

fn parse_embedding(body: &str) -> Result<Vec<f64>, TransportError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| TransportError::InvalidResponse(e.to_string()))?;
    v.pointer("/data/0/embedding")
        .and_then(|e| e.as_array())
        .and_then(|arr| arr.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>())
        .ok_or_else(|| TransportError::InvalidResponse("missing data[0].embedding".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    offset: u64,
    dim: usize,
    normalized: bool,
}

/// Vectors stored as little-endian f64 in `vectors.bin`, indexed by a
/// JSON-lines manifest keyed by hash(embedder id, text).
pub struct EmbeddingCache {
    dir: PathBuf,
    index: HashMap<String, EmbeddingVector>,
    next_offset: u64,
}

const CACHE_BIN: &str = "vectors.bin";
const CACHE_INDEX: &str = "vectors.jsonl";

pub fn cache_key(model_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

impl EmbeddingCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EmbedError> {
        let dir = dir.into();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EmbedError::CacheIo { path, source }
        };
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let bin_path = dir.join(CACHE_BIN);
        let idx_path = dir.join(CACHE_INDEX);
        let mut bytes = Vec::new();
        if bin_path.exists() {
            File::open(&bin_path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(io(&bin_path))?;
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut index = HashMap::new();
        let mut next_offset = 0;
        if idx_path.exists() {
            let file = File::open(&idx_path).map_err(io(&idx_path))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io(&idx_path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(&line)
                    .map_err(|e| EmbedError::CacheCorrupt(e.to_string()))?;
                let start = entry.offset as usize;
                let end = start + entry.dim;
                if end > floats.len() {
                    // a write interrupted between index and data; drop it
                    log::warn!("embedding cache entry {} truncated; ignoring", entry.key);
                    continue;
                }
                let v = EmbeddingVector::new(floats[start..end].to_vec(), entry.normalized)?;
                next_offset = next_offset.max(end as u64);
                index.insert(entry.key, v);
            }
        }
        // bytes past the last indexed vector belong to an interrupted append
        if (floats.len() as u64) > next_offset {
            let f = OpenOptions::new()
                .write(true)
                .open(&bin_path)
                .map_err(io(&bin_path))?;
            f.set_len(next_offset * 8).map_err(io(&bin_path))?;
        }
        Ok(Self {
            dir,
            index,
            next_offset,
        })
    }

    pub fn get(&self, key: &str) -> Option<&EmbeddingVector> {
        self.index.get(key)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn insert(&mut self, key: String, v: EmbeddingVector) -> Result<(), EmbedError> {
        if self.index.contains_key(&key) {
            return Ok(());
        }
        let bin_path = self.dir.join(CACHE_BIN);
        let idx_path = self.dir.join(CACHE_INDEX);
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EmbedError::CacheIo { path, source }
        };
        let mut bin = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&bin_path)
            .map_err(io(&bin_path))?;
        let bytes: Vec<u8> = v.values().iter().flat_map(|x| x.to_le_bytes()).collect();
        bin.write_all(&bytes).map_err(io(&bin_path))?;
        bin.flush().map_err(io(&bin_path))?;
        let entry = CacheEntry {
            key: key.clone(),
            offset: self.next_offset,
            dim: v.dim(),
            normalized: v.is_normalized(),
        };
        let mut idx = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&idx_path)
            .map_err(io(&idx_path))?;
        writeln!(
            idx,
            "{}",
            serde_json::to_string(&entry).expect("serializable")
        )
        .map_err(io(&idx_path))?;
        self.next_offset += v.dim() as u64;
        self.index.insert(key, v);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmbedStats {
    pub cache_hits: usize,
    pub calls: usize,
}

/// Embeds every record of one group, reusing cached vectors.
pub fn embed_group(
    records: &[FeedbackRecord],
    embedder: &dyn Embedder,
    cache: &mut EmbeddingCache,
    parallelism: usize,
) -> Result<(GroupEmbeddings, EmbedStats), EmbedError> {
    let label = match records.first() {
        Some(r) => r.condition.group_label(),
        None => return GroupEmbeddings::new("", vec![]).map(|g| (g, EmbedStats::default())),
    };
    if let Some(r) = records.iter().find(|r| r.condition.group_label() != label) {
        return Err(EmbedError::MixedGroups(
            label.to_string(),
            r.condition.group_label().to_string(),
        ));
    }
    let model_id = embedder.model_id();
    let keys: Vec<String> = records
        .iter()
        .map(|r| cache_key(&model_id, &r.response_text))
        .collect();

    let mut stats = EmbedStats::default();
    let mut seen = HashSet::new();
    let mut misses: Vec<(String, &str)> = Vec::new();
    for (key, rec) in keys.iter().zip(records) {
        if cache.get(key).is_some() {
            stats.cache_hits += 1;
        } else if seen.insert(key.as_str()) {
            misses.push((key.clone(), rec.response_text.as_str()));
        }
    }

    if !misses.is_empty() {
        let results: Vec<Mutex<Option<Result<EmbeddingVector, EmbedError>>>> =
            misses.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..parallelism.max(1).min(misses.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((_, text)) = misses.get(i) else {
                        break;
                    };
                    let r = embedder.embed(text);
                    *results[i].lock().expect("unpoisoned") = Some(r);
                });
            }
        });
        let mut failed = Vec::new();
        for ((key, _), slot) in misses.iter().zip(results) {
            match slot.into_inner().expect("unpoisoned") {
                Some(Ok(v)) => {
                    stats.calls += 1;
                    cache.insert(key.clone(), v)?;
                }
                Some(Err(e)) => {
                    stats.calls += 1;
                    failed.push(format!("{key}: {e}"));
                }
                None => failed.push(format!("{key}: not executed")),
            }
        }
        if !failed.is_empty() {
            return Err(EmbedError::Batch {
                total: records.len(),
                failed,
            });
        }
    }

    let pairs = keys
        .iter()
        .zip(records)
        .map(|(k, r)| {
            let v = cache.get(k).expect("embedded above").clone();
            (r.essay_id.clone(), v)
        })
        .collect();
    Ok((GroupEmbeddings::new(label, pairs)?, stats))
}
