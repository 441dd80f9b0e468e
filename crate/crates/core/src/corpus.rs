//! Essay ingestion, gendered-vocabulary screening and counterfactual pairing.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{self, Direction, GenderLexicon, SwapResult};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("column {column:?} not found in header of {path}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("no usable essays in {path} ({skipped} rows skipped)")]
    NoRows { path: PathBuf, skipped: usize },
    #[error("duplicate essay id {0:?}")]
    DuplicateId(String),
    #[error("per_group_cap must be at least 1")]
    InvalidCap,
    #[error("essay {essay_id} produced no substitutions under {direction}; lexicon and screening disagree")]
    ZeroSubstitutions {
        essay_id: String,
        direction: Direction,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Essay {
    pub essay_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_topic: Option<String>,
}

/// CSV column mapping; defaults match the AES 2.0 training export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub id_column: String,
    pub text_column: String,
    pub topic_column: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            id_column: "essay_id".to_string(),
            text_column: "full_text".to_string(),
            topic_column: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub essays: Vec<Essay>,
    pub skipped_empty: usize,
}

pub fn ingest_essays(
    path: impl AsRef<Path>,
    schema: &ColumnMapping,
) -> Result<Ingested, CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(io)?;
    let headers = reader.headers().map_err(io)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let id_idx = column(&schema.id_column)?;
    let text_idx = column(&schema.text_column)?;
    let topic_idx = schema.topic_column.as_deref().map(column).transpose()?;

    let mut essays = Vec::new();
    let mut skipped_empty = 0;
    let mut ids = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(io)?;
        let text = record.get(text_idx).unwrap_or_default();
        if text.trim().is_empty() {
            skipped_empty += 1;
            continue;
        }
        let essay_id = record.get(id_idx).unwrap_or_default().trim().to_string();
        if !ids.insert(essay_id.clone()) {
            return Err(CorpusError::DuplicateId(essay_id));
        }
        let prompt_topic = topic_idx
            .and_then(|i| record.get(i))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string);
        essays.push(Essay {
            essay_id,
            text: text.to_string(),
            prompt_topic,
        });
    }
    if essays.is_empty() {
        return Err(CorpusError::NoRows {
            path: path.to_path_buf(),
            skipped: skipped_empty,
        });
    }
    Ok(Ingested {
        essays,
        skipped_empty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// First `per_group_cap` qualifying essays in corpus order.
    CorpusOrder,
    /// A seeded uniform sample of `per_group_cap`, kept in corpus order.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub per_group_cap: usize,
    pub require_exclusive: bool,
    pub min_tokens: usize,
    pub selection: Selection,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            per_group_cap: 300,
            require_exclusive: false,
            min_tokens: 20,
            selection: Selection::CorpusOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    NoGenderedTerms,
    Tie,
    /// Both genders present while `require_exclusive` is set.
    Mixed,
    BelowThreshold,
    /// Qualified but not selected because the group was full.
    OverCap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub essay: Essay,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedCorpus {
    pub group_m: Vec<Essay>,
    pub group_f: Vec<Essay>,
    pub excluded: Vec<Excluded>,
    pub gendered_word_ratio: f64,
    /// Non-fatal shortfalls, e.g. a group smaller than the cap.
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    M,
    F,
}

fn classify(counts: &lexicon::TermCounts, config: &ScreenConfig) -> Result<Group, ExclusionReason> {
    let (m, f) = (counts.male, counts.female);
    if m == 0 && f == 0 {
        return Err(ExclusionReason::NoGenderedTerms);
    }
    if m == f {
        return Err(ExclusionReason::Tie);
    }
    if config.require_exclusive && m > 0 && f > 0 {
        return Err(ExclusionReason::Mixed);
    }
    if counts.total_tokens < config.min_tokens {
        return Err(ExclusionReason::BelowThreshold);
    }
    Ok(if m > f { Group::M } else { Group::F })
}

type Indexed = Vec<(usize, Essay)>;

fn select(candidates: Vec<(usize, Essay)>, config: &ScreenConfig, salt: u64) -> (Indexed, Indexed) {
    if candidates.len() <= config.per_group_cap {
        return (candidates, Vec::new());
    }
    match config.selection {
        Selection::CorpusOrder => {
            let mut kept = candidates;
            let rest = kept.split_off(config.per_group_cap);
            (kept, rest)
        }
        Selection::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(salt);
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.shuffle(&mut rng);
            let chosen: HashSet<usize> = order[..config.per_group_cap].iter().copied().collect();
            let (kept, rest): (Vec<_>, Vec<_>) = candidates
                .into_iter()
                .enumerate()
                .partition(|(i, _)| chosen.contains(i));
            let unwrap = |v: Vec<(usize, (usize, Essay))>| v.into_iter().map(|(_, e)| e).collect();
            (unwrap(kept), unwrap(rest))
        }
    }
}

/// Splits essays into male- and female-dominant groups.
pub fn screen_and_classify(
    essays: &[Essay],
    lexicon: &GenderLexicon,
    config: &ScreenConfig,
) -> Result<ScreenedCorpus, CorpusError> {
    if config.per_group_cap == 0 {
        return Err(CorpusError::InvalidCap);
    }
    let mut seen = HashSet::new();
    for e in essays {
        if !seen.insert(e.essay_id.as_str()) {
            return Err(CorpusError::DuplicateId(e.essay_id.clone()));
        }
    }

    let mut excluded: Vec<(usize, Excluded)> = Vec::new();
    let mut m_candidates = Vec::new();
    let mut f_candidates = Vec::new();
    let mut counts = Vec::with_capacity(essays.len());
    for (i, essay) in essays.iter().enumerate() {
        let c = lexicon::gender_term_counts(&essay.text, lexicon);
        counts.push(c);
        match classify(&c, config) {
            Ok(Group::M) => m_candidates.push((i, essay.clone())),
            Ok(Group::F) => f_candidates.push((i, essay.clone())),
            Err(reason) => excluded.push((
                i,
                Excluded {
                    essay: essay.clone(),
                    reason,
                },
            )),
        }
    }

    let (group_m, m_over) = select(m_candidates, config, 0);
    let (group_f, f_over) = select(f_candidates, config, 1);
    for (i, essay) in m_over.into_iter().chain(f_over) {
        excluded.push((
            i,
            Excluded {
                essay,
                reason: ExclusionReason::OverCap,
            },
        ));
    }
    excluded.sort_by_key(|(i, _)| *i);

    let mut warnings = Vec::new();
    for (label, group) in [("M", &group_m), ("F", &group_f)] {
        if group.len() < config.per_group_cap {
            let msg = format!(
                "group {label} has {} essays, fewer than the cap of {}",
                group.len(),
                config.per_group_cap
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let (gendered, total) = group_m
        .iter()
        .chain(group_f.iter())
        .map(|(i, _)| counts[*i])
        .fold((0usize, 0usize), |(g, t), c| {
            (g + c.gendered(), t + c.total_tokens)
        });
    let gendered_word_ratio = if total == 0 {
        0.0
    } else {
        gendered as f64 / total as f64
    };

    let strip = |v: Vec<(usize, Essay)>| v.into_iter().map(|(_, e)| e).collect();
    Ok(ScreenedCorpus {
        group_m: strip(group_m),
        group_f: strip(group_f),
        excluded: excluded.into_iter().map(|(_, e)| e).collect(),
        gendered_word_ratio,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub source: Essay,
    pub counterfactual_text: String,
    pub direction: Direction,
    pub substitution_log: SwapResult,
}

pub fn build_pairs(
    corpus: &ScreenedCorpus,
    lexicon: &GenderLexicon,
) -> Result<Vec<CounterfactualPair>, CorpusError> {
    let m = corpus.group_m.iter().map(|e| (e, Direction::MaleToFemale));
    let f = corpus.group_f.iter().map(|e| (e, Direction::FemaleToMale));
    m.chain(f)
        .map(|(essay, direction)| {
            let log = lexicon::swap(&essay.text, direction, lexicon);
            if log.substitutions.is_empty() {
                return Err(CorpusError::ZeroSubstitutions {
                    essay_id: essay.essay_id.clone(),
                    direction,
                });
            }
            Ok(CounterfactualPair {
                source: essay.clone(),
                counterfactual_text: log.output_text.clone(),
                direction,
                substitution_log: log,
            })
        })
        .collect()
}
