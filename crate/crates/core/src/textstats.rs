//! Lexical and pragmatic measurements of feedback texts: academic word
//! density, concreteness, pronoun rates, sentence types, and the
//! supportive/controlling phrase balance.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextStatsError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("resource {0} is empty")]
    EmptyResource(&'static str),
    #[error("concreteness rating {rating} for {lemma:?} is outside [1, 5]")]
    RatingOutOfRange { lemma: String, rating: f64 },
    #[error("no records to aggregate")]
    NoRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    #[serde(rename = ".")]
    Period,
    #[serde(rename = "?")]
    Question,
    #[serde(rename = "!")]
    Exclamation,
    #[serde(rename = "none")]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub terminal: Terminal,
    pub tokens: Vec<String>,
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201d}' | '\u{2019}' | ')' | ']')
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lowercased word tokens: alphanumeric runs, keeping word-internal apostrophes.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if is_apostrophe(c)
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            current.push('\'');
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Splits on runs of `.`, `?`, `!`, absorbing closing quotes and brackets
/// that follow the run. Decimal points are not boundaries; fragments without
/// word tokens are dropped.
pub fn tokenize_sentences(text: &str) -> Vec<Sentence> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    let push = |from: usize, to: usize, terminal: Terminal, out: &mut Vec<Sentence>| {
        let s: String = chars[from..to].iter().collect();
        let trimmed = s.trim();
        let tokens = tokenize_words(trimmed);
        if !tokens.is_empty() {
            out.push(Sentence {
                text: trimmed.to_string(),
                terminal,
                tokens,
            });
        }
    };
    while i < chars.len() {
        let c = chars[i];
        let decimal = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if matches!(c, '.' | '?' | '!') && !decimal {
            let mut j = i;
            while j < chars.len() && matches!(chars[j], '.' | '?' | '!') {
                j += 1;
            }
            let run = &chars[i..j];
            let terminal = if run.contains(&'?') {
                Terminal::Question
            } else if run.contains(&'!') {
                Terminal::Exclamation
            } else {
                Terminal::Period
            };
            while j < chars.len() && is_closer(chars[j]) {
                j += 1;
            }
            if j == chars.len() || chars[j].is_whitespace() {
                push(start, j, terminal, &mut sentences);
                start = j;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    if start < chars.len() {
        push(start, chars.len(), Terminal::None, &mut sentences);
    }
    sentences
}

/// Candidate lemmas of a token, most specific first: the surface form, then
/// suffix-stripped forms (`ing`, `ed`, `es`, `s`), each also tried with a
/// restored final `e`.
pub fn lemma_candidates(token: &str) -> Vec<String> {
    let mut out = vec![token.to_string()];
    for suffix in ["ing", "ed", "es", "s"] {
        if let Some(stem) = token.strip_suffix(suffix) {
            if stem.chars().count() >= 2 {
                out.push(stem.to_string());
                out.push(format!("{stem}e"));
            }
        }
    }
    out
}

fn lookup<'a, T>(token: &str, table: &'a HashMap<String, T>) -> Option<&'a T> {
    lemma_candidates(token).iter().find_map(|c| table.get(c))
}

fn in_set(token: &str, set: &HashSet<String>) -> bool {
    lemma_candidates(token).iter().any(|c| set.contains(c))
}

/// Share of tokens whose lemma is an academic headword; 0 for no tokens.
pub fn academic_ratio(tokens: &[String], academic_words: &HashSet<String>) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let hits = tokens.iter().filter(|t| in_set(t, academic_words)).count();
    hits as f64 / tokens.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concreteness {
    pub mean: Option<f64>,
    pub coverage: f64,
}

pub fn concreteness_mean(tokens: &[String], norms: &HashMap<String, f64>) -> Concreteness {
    let ratings: Vec<f64> = tokens
        .iter()
        .filter_map(|t| lookup(t, norms).copied())
        .collect();
    let coverage = if tokens.is_empty() {
        0.0
    } else {
        ratings.len() as f64 / tokens.len() as f64
    };
    let mean = (!ratings.is_empty()).then(|| ratings.iter().sum::<f64>() / ratings.len() as f64);
    Concreteness { mean, coverage }
}

/// First- and second-person pronouns per 100 tokens.
pub fn pronoun_rates(tokens: &[String], lexicons: &ResourceLexicons) -> (f64, f64) {
    if tokens.is_empty() {
        return (0.0, 0.0);
    }
    let count = |set: &HashSet<String>| tokens.iter().filter(|t| set.contains(*t)).count();
    let total = tokens.len() as f64;
    (
        100.0 * count(&lexicons.pronouns_first) as f64 / total,
        100.0 * count(&lexicons.pronouns_second) as f64 / total,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceProps {
    pub declarative: f64,
    pub interrogative: f64,
    pub exclamative: f64,
    /// Set when there were no sentences (all proportions zero).
    pub empty: bool,
}

pub fn sentence_type_props(sentences: &[Sentence]) -> SentenceProps {
    if sentences.is_empty() {
        return SentenceProps {
            declarative: 0.0,
            interrogative: 0.0,
            exclamative: 0.0,
            empty: true,
        };
    }
    let n = sentences.len() as f64;
    let count = |t: Terminal| sentences.iter().filter(|s| s.terminal == t).count() as f64;
    let interrogative = count(Terminal::Question);
    let exclamative = count(Terminal::Exclamation);
    SentenceProps {
        declarative: (n - interrogative - exclamative) / n,
        interrogative: interrogative / n,
        exclamative: exclamative / n,
        empty: false,
    }
}

/// A phrase pattern pre-tokenized with [`tokenize_words`].
fn compile_patterns(patterns: &[String]) -> Vec<Vec<String>> {
    let mut compiled: Vec<Vec<String>> = patterns
        .iter()
        .map(|p| tokenize_words(p))
        .filter(|p| !p.is_empty())
        .collect();
    compiled.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    compiled.dedup();
    compiled
}

/// Non-overlapping matches, leftmost first and longest first at each position.
fn count_matches(tokens: &[String], compiled: &[Vec<String>]) -> usize {
    let mut i = 0;
    let mut hits = 0;
    while i < tokens.len() {
        match compiled.iter().find(|p| tokens[i..].starts_with(p)) {
            Some(p) => {
                hits += 1;
                i += p.len();
            }
            None => i += 1,
        }
    }
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Supportiveness {
    pub supportive: usize,
    pub controlling: usize,
    pub supportive_per100: f64,
    pub controlling_per100: f64,
    /// (supportive − controlling) / total tokens, in [−1, 1].
    pub score: f64,
}

/// Pattern matches are counted within sentences, never across a boundary.
pub fn supportiveness(
    sentences: &[Sentence],
    supportive: &[String],
    controlling: &[String],
) -> Supportiveness {
    let sup = compile_patterns(supportive);
    let ctrl = compile_patterns(controlling);
    let total: usize = sentences.iter().map(|s| s.tokens.len()).sum();
    let supportive: usize = sentences
        .iter()
        .map(|s| count_matches(&s.tokens, &sup))
        .sum();
    let controlling: usize = sentences
        .iter()
        .map(|s| count_matches(&s.tokens, &ctrl))
        .sum();
    if total == 0 {
        return Supportiveness {
            supportive,
            controlling,
            supportive_per100: 0.0,
            controlling_per100: 0.0,
            score: 0.0,
        };
    }
    let t = total as f64;
    Supportiveness {
        supportive,
        controlling,
        supportive_per100: 100.0 * supportive as f64 / t,
        controlling_per100: 100.0 * controlling as f64 / t,
        score: (supportive as f64 - controlling as f64) / t,
    }
}

pub const FIRST_PERSON: [&str; 10] = [
    "i",
    "me",
    "my",
    "mine",
    "we",
    "us",
    "our",
    "ours",
    "myself",
    "ourselves",
];
pub const SECOND_PERSON: [&str; 5] = ["you", "your", "yours", "yourself", "yourselves"];
pub const SUPPORTIVE_PATTERNS: [&str; 7] = [
    "you could",
    "you might",
    "you may want",
    "consider",
    "perhaps",
    "one option",
    "feel free",
];
pub const CONTROLLING_PATTERNS: [&str; 8] = [
    "you must",
    "you need to",
    "you have to",
    "make sure",
    "avoid",
    "focus on",
    "do not",
    "don't",
];

const SHIPPED_AWL: &str = include_str!("../resources/awl_sample.txt");
const SHIPPED_NORMS: &str = include_str!("../resources/concreteness_fixture.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternConfig {
    pub version: String,
    pub supportive: Vec<String>,
    pub controlling: Vec<String>,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            version: "patterns-v1".to_string(),
            supportive: SUPPORTIVE_PATTERNS.iter().map(|s| s.to_string()).collect(),
            controlling: CONTROLLING_PATTERNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceLexicons {
    pub academic_words: HashSet<String>,
    pub concreteness_norms: HashMap<String, f64>,
    pub pronouns_first: HashSet<String>,
    pub pronouns_second: HashSet<String>,
    pub patterns: PatternConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TextStatsError + '_ {
    move |source| TextStatsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn parse_headwords(source: &str) -> Result<HashSet<String>, TextStatsError> {
    let words: HashSet<String> = source
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect();
    if words.is_empty() {
        return Err(TextStatsError::EmptyResource("academic_words"));
    }
    Ok(words)
}

pub fn load_headwords(path: impl AsRef<Path>) -> Result<HashSet<String>, TextStatsError> {
    let path = path.as_ref();
    parse_headwords(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

/// Reads a CSV with a `lemma` (or `word`) column and a `rating` (or `conc.m`) column.
pub fn parse_norms(source: &str, path: &Path) -> Result<HashMap<String, f64>, TextStatsError> {
    let parse_err = |message: String| TextStatsError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(e.to_string()))?
        .clone();
    let find = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
    };
    let lemma_col = find(&["lemma", "word"]).ok_or_else(|| parse_err("no lemma column".into()))?;
    let rating_col =
        find(&["rating", "conc.m"]).ok_or_else(|| parse_err("no rating column".into()))?;
    let mut norms = HashMap::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        let lemma = row.get(lemma_col).unwrap_or("").to_lowercase();
        let rating: f64 = row
            .get(rating_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| parse_err(format!("bad rating on data row {}", line + 1)))?;
        if !(1.0..=5.0).contains(&rating) {
            return Err(TextStatsError::RatingOutOfRange { lemma, rating });
        }
        if !lemma.is_empty() {
            norms.insert(lemma, rating);
        }
    }
    if norms.is_empty() {
        return Err(TextStatsError::EmptyResource("concreteness_norms"));
    }
    Ok(norms)
}

pub fn load_norms(path: impl AsRef<Path>) -> Result<HashMap<String, f64>, TextStatsError> {
    let path = path.as_ref();
    parse_norms(&std::fs::read_to_string(path).map_err(io_err(path))?, path)
}

pub fn load_patterns(path: impl AsRef<Path>) -> Result<PatternConfig, TextStatsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let cfg: PatternConfig = serde_json::from_str(&text).map_err(|e| TextStatsError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if cfg.supportive.is_empty() || cfg.controlling.is_empty() {
        return Err(TextStatsError::EmptyResource("patterns"));
    }
    Ok(cfg)
}

impl ResourceLexicons {
    /// Small shipped fixtures plus the default pronoun and pattern lists.
    pub fn shipped() -> Self {
        Self {
            academic_words: parse_headwords(SHIPPED_AWL).expect("shipped list is valid"),
            concreteness_norms: parse_norms(SHIPPED_NORMS, Path::new("concreteness_fixture.csv"))
                .expect("shipped norms are valid"),
            ..Self::with_words(HashSet::new(), HashMap::new())
        }
    }

    pub fn with_words(
        academic_words: HashSet<String>,
        concreteness_norms: HashMap<String, f64>,
    ) -> Self {
        Self {
            academic_words,
            concreteness_norms,
            pronouns_first: FIRST_PERSON.iter().map(|s| s.to_string()).collect(),
            pronouns_second: SECOND_PERSON.iter().map(|s| s.to_string()).collect(),
            patterns: PatternConfig::default(),
        }
    }

    pub fn load(
        academic_words: Option<&Path>,
        norms: Option<&Path>,
        patterns: Option<&Path>,
    ) -> Result<Self, TextStatsError> {
        let mut res = Self::shipped();
        if let Some(p) = academic_words {
            res.academic_words = load_headwords(p)?;
        }
        if let Some(p) = norms {
            res.concreteness_norms = load_norms(p)?;
        }
        if let Some(p) = patterns {
            res.patterns = load_patterns(p)?;
        }
        Ok(res)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextStatsRecord {
    pub essay_id: String,
    pub group_label: String,
    pub tokens: usize,
    pub sentences: usize,
    pub academic_ratio: f64,
    pub concreteness_mean: Option<f64>,
    pub concreteness_coverage: f64,
    pub first_person_per100: f64,
    pub second_person_per100: f64,
    pub declarative: f64,
    pub interrogative: f64,
    pub exclamative: f64,
    pub supportive_per100: f64,
    pub controlling_per100: f64,
    pub supportiveness: f64,
}

pub fn analyze_text(
    essay_id: &str,
    group_label: &str,
    text: &str,
    res: &ResourceLexicons,
) -> TextStatsRecord {
    let sentences = tokenize_sentences(text);
    let tokens: Vec<String> = sentences
        .iter()
        .flat_map(|s| s.tokens.iter().cloned())
        .collect();
    let conc = concreteness_mean(&tokens, &res.concreteness_norms);
    let (first, second) = pronoun_rates(&tokens, res);
    let props = sentence_type_props(&sentences);
    let sup = supportiveness(
        &sentences,
        &res.patterns.supportive,
        &res.patterns.controlling,
    );
    TextStatsRecord {
        essay_id: essay_id.to_string(),
        group_label: group_label.to_string(),
        tokens: tokens.len(),
        sentences: sentences.len(),
        academic_ratio: academic_ratio(&tokens, &res.academic_words),
        concreteness_mean: conc.mean,
        concreteness_coverage: conc.coverage,
        first_person_per100: first,
        second_person_per100: second,
        declarative: props.declarative,
        interrogative: props.interrogative,
        exclamative: props.exclamative,
        supportive_per100: sup.supportive_per100,
        controlling_per100: sup.controlling_per100,
        supportiveness: sup.score,
    }
}

pub const MEASURES: [&str; 10] = [
    "academic_ratio",
    "concreteness_mean",
    "first_person_per100",
    "second_person_per100",
    "declarative",
    "interrogative",
    "exclamative",
    "supportive_per100",
    "controlling_per100",
    "supportiveness",
];

impl TextStatsRecord {
    pub fn measure(&self, name: &str) -> Option<f64> {
        match name {
            "academic_ratio" => Some(self.academic_ratio),
            "concreteness_mean" => self.concreteness_mean,
            "first_person_per100" => Some(self.first_person_per100),
            "second_person_per100" => Some(self.second_person_per100),
            "declarative" => Some(self.declarative),
            "interrogative" => Some(self.interrogative),
            "exclamative" => Some(self.exclamative),
            "supportive_per100" => Some(self.supportive_per100),
            "controlling_per100" => Some(self.controlling_per100),
            "supportiveness" => Some(self.supportiveness),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_label: String,
    pub records: usize,
    pub measures: BTreeMap<String, MeasureSummary>,
}

/// Per-group mean and sample standard deviation of every measure; groups are
/// listed in order of first appearance. Missing values (no concreteness
/// coverage) are skipped.
pub fn aggregate_groups(records: &[TextStatsRecord]) -> Result<Vec<GroupSummary>, TextStatsError> {
    if records.is_empty() {
        return Err(TextStatsError::NoRecords);
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.group_label.as_str()) {
            order.push(&r.group_label);
        }
    }
    Ok(order
        .into_iter()
        .map(|label| {
            let members: Vec<&TextStatsRecord> =
                records.iter().filter(|r| r.group_label == label).collect();
            let measures = MEASURES
                .iter()
                .map(|m| {
                    let values: Vec<f64> = members.iter().filter_map(|r| r.measure(m)).collect();
                    (m.to_string(), summarize(&values))
                })
                .collect();
            GroupSummary {
                group_label: label.to_string(),
                records: members.len(),
                measures,
            }
        })
        .collect())
}

fn summarize(values: &[f64]) -> MeasureSummary {
    let n = values.len();
    if n == 0 {
        return MeasureSummary {
            n,
            mean: None,
            sd: None,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeasureSummary {
        n,
        mean: Some(mean),
        sd: Some(sd),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize_words(s)
    }

    #[test]
    fn sentence_terminals() {
        let s = tokenize_sentences("Great! Why? Ok.");
        let t: Vec<Terminal> = s.iter().map(|s| s.terminal).collect();
        assert_eq!(
            t,
            vec![Terminal::Exclamation, Terminal::Question, Terminal::Period]
        );
        assert!(tokenize_sentences("").is_empty());
    }

    #[test]
    fn quote_absorbed() {
        let s = tokenize_sentences("He said \"Go!\" Then left.");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "He said \"Go!\"");
        assert_eq!(s[0].terminal, Terminal::Exclamation);
    }

    #[test]
    fn decimals_and_fragments() {
        let s = tokenize_sentences("Scored 3.5 points. well done");
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].terminal, Terminal::None);
    }

    #[test]
    fn contractions_stay_whole() {
        assert_eq!(
            toks("Don't stop, it's fine"),
            vec!["don't", "stop", "it's", "fine"]
        );
    }

    #[test]
    fn lemmatized_academic_match() {
        let set: HashSet<String> = ["analyse", "data"].iter().map(|s| s.to_string()).collect();
        assert_eq!(academic_ratio(&toks("we analyse data"), &set), 2.0 / 3.0);
        assert_eq!(academic_ratio(&toks("analysing analysed"), &set), 1.0);
        assert_eq!(academic_ratio(&[], &set), 0.0);
    }

    #[test]
    fn concreteness_coverage() {
        let norms: HashMap<String, f64> =
            [("apple".to_string(), 5.0), ("idea".to_string(), 1.5)].into();
        let c = concreteness_mean(&toks("apple idea"), &norms);
        assert_eq!(c.mean, Some(3.25));
        let none = concreteness_mean(&toks("the cat"), &norms);
        assert_eq!((none.mean, none.coverage), (None, 0.0));
    }

    #[test]
    fn overlapping_patterns_count_once() {
        let s = tokenize_sentences("You need to do not stop.");
        let r = supportiveness(
            &s,
            &[],
            &["you need to".into(), "need".into(), "do not".into()],
        );
        assert_eq!(r.controlling, 2);
    }

    #[test]
    fn aggregate_single_and_pair() {
        let res = ResourceLexicons::shipped();
        let a = analyze_text("1", "M", "I like your essay.", &res);
        let mut b = a.clone();
        b.essay_id = "2".into();
        b.first_person_per100 = 75.0;
        let mut c = a.clone();
        c.group_label = "F".into();
        let out = aggregate_groups(&[a, b, c]).unwrap();
        assert_eq!(out[0].group_label, "M");
        assert_eq!(out[0].measures["first_person_per100"].mean, Some(50.0));
        assert_eq!(out[1].measures["first_person_per100"].sd, Some(0.0));
        assert!(matches!(
            aggregate_groups(&[]),
            Err(TextStatsError::NoRecords)
        ));
    }

    #[test]
    fn shipped_resources_load() {
        let r = ResourceLexicons::shipped();
        assert!(r.academic_words.contains("analyse"));
        assert_eq!(r.concreteness_norms["apple"], 5.0);
    }

    #[test]
    fn out_of_range_rating_rejected() {
        let err = parse_norms("lemma,rating\nx,7\n", Path::new("t.csv")).unwrap_err();
        assert!(matches!(err, TextStatsError::RatingOutOfRange { .. }));
    }
}
