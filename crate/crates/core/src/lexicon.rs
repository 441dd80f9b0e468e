//! Gendered word-pair lexicon and direction-specific counterfactual swapping.
//!
//! Text is scanned into word tokens (maximal runs of alphanumeric characters).
//! A token immediately followed by `.` is extended to include the period when
//! the period-bearing form is a lexicon entry, so titles such as `Mr.` match
//! as a single unit. Everything outside the substituted tokens is copied
//! through byte-for-byte.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The lexicon shipped with the crate (192 single-token pairs).
pub const SHIPPED_LEXICON: &str = include_str!("../resources/gender_pairs.tsv");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed entry {content:?} (expected `male<TAB>female`)")]
    Malformed { line: usize, content: String },
    #[error("duplicate form {form:?} on lines {first_line} and {second_line}")]
    DuplicateForm {
        form: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("lexicon contains no pairs")]
    Empty,
}

/// Swap direction: which gender's forms are replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "M2F")]
    MaleToFemale,
    #[serde(rename = "F2M")]
    FemaleToMale,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::MaleToFemale => Direction::FemaleToMale,
            Direction::FemaleToMale => Direction::MaleToFemale,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::MaleToFemale => "M2F",
            Direction::FemaleToMale => "F2M",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPair {
    pub male: String,
    pub female: String,
}

/// Context test used to pick between the two replacements of an ambiguous surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextRule {
    /// `replacement_a` when the next non-space character is alphabetic
    /// (a determiner use such as "her hair"), `replacement_b` otherwise.
    NextAlphabetic,
    /// Always `replacement_a`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguousRule {
    pub surface: String,
    pub direction: Direction,
    pub rule: ContextRule,
    pub replacement_a: String,
    pub replacement_b: String,
}

/// Default context rules for possessive/object pronouns that have no
/// one-to-one counterpart.
pub fn default_ambiguous_rules() -> Vec<AmbiguousRule> {
    let rule = |surface: &str, direction, rule, a: &str, b: &str| AmbiguousRule {
        surface: surface.to_string(),
        direction,
        rule,
        replacement_a: a.to_string(),
        replacement_b: b.to_string(),
    };
    vec![
        rule(
            "her",
            Direction::FemaleToMale,
            ContextRule::NextAlphabetic,
            "his",
            "him",
        ),
        rule(
            "his",
            Direction::MaleToFemale,
            ContextRule::NextAlphabetic,
            "her",
            "hers",
        ),
        rule(
            "hers",
            Direction::FemaleToMale,
            ContextRule::Fixed,
            "his",
            "his",
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapRule {
    Exact,
    AmbiguousHeuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    /// Word-token index in the input text.
    pub position: usize,
    pub original: String,
    pub replacement: String,
    pub rule: SwapRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SwapResult {
    pub output_text: String,
    pub substitutions: Vec<Substitution>,
    pub ambiguous_count: usize,
}

/// One line of the human-review report for heuristic substitutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub essay_id: String,
    pub position: usize,
    pub original: String,
    pub replacement: String,
    pub rule: SwapRule,
}

impl SwapResult {
    pub fn review_entries(&self, essay_id: &str) -> Vec<ReviewEntry> {
        self.substitutions
            .iter()
            .filter(|s| s.rule == SwapRule::AmbiguousHeuristic)
            .map(|s| ReviewEntry {
                essay_id: essay_id.to_string(),
                position: s.position,
                original: s.original.clone(),
                replacement: s.replacement.clone(),
                rule: s.rule,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TermCounts {
    pub male: usize,
    pub female: usize,
    pub total_tokens: usize,
}

impl TermCounts {
    pub fn gendered(&self) -> usize {
        self.male + self.female
    }
}

#[derive(Debug, Clone)]
pub struct GenderLexicon {
    pairs: Vec<WordPair>,
    ambiguous: Vec<AmbiguousRule>,
    by_male: HashMap<String, usize>,
    by_female: HashMap<String, usize>,
}

fn valid_form(form: &str) -> bool {
    !form.is_empty()
        && form.chars().any(char::is_alphabetic)
        && form.chars().all(|c| c.is_alphabetic() || c == '.')
}

impl GenderLexicon {
    /// Parses `male<TAB>female` lines; blank lines and `#` comments are skipped.
    pub fn parse(source: &str) -> Result<Self, LexiconError> {
        let mut pairs = Vec::new();
        let mut seen_male: HashMap<String, usize> = HashMap::new();
        let mut seen_female: HashMap<String, usize> = HashMap::new();

        for (idx, raw) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (male, female) = match (fields.next(), fields.next(), fields.next()) {
                (Some(m), Some(f), None) => (m.trim(), f.trim()),
                _ => {
                    return Err(LexiconError::Malformed {
                        line: line_no,
                        content: line.to_string(),
                    })
                }
            };
            if !valid_form(male) || !valid_form(female) {
                return Err(LexiconError::Malformed {
                    line: line_no,
                    content: line.to_string(),
                });
            }
            for (form, seen) in [(male, &mut seen_male), (female, &mut seen_female)] {
                let key = form.to_lowercase();
                if let Some(&first_line) = seen.get(&key) {
                    return Err(LexiconError::DuplicateForm {
                        form: form.to_string(),
                        first_line,
                        second_line: line_no,
                    });
                }
                seen.insert(key, line_no);
            }
            pairs.push(WordPair {
                male: male.to_string(),
                female: female.to_string(),
            });
        }
        Self::from_pairs(pairs, default_ambiguous_rules())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_LEXICON).expect("shipped lexicon is valid")
    }

    pub fn from_pairs(
        pairs: Vec<WordPair>,
        ambiguous: Vec<AmbiguousRule>,
    ) -> Result<Self, LexiconError> {
        if pairs.is_empty() {
            return Err(LexiconError::Empty);
        }
        let mut by_male = HashMap::new();
        let mut by_female = HashMap::new();
        for (i, p) in pairs.iter().enumerate() {
            if let Some(j) = by_male.insert(p.male.to_lowercase(), i) {
                return Err(LexiconError::DuplicateForm {
                    form: p.male.clone(),
                    first_line: j + 1,
                    second_line: i + 1,
                });
            }
            if let Some(j) = by_female.insert(p.female.to_lowercase(), i) {
                return Err(LexiconError::DuplicateForm {
                    form: p.female.clone(),
                    first_line: j + 1,
                    second_line: i + 1,
                });
            }
        }
        Ok(Self {
            pairs,
            ambiguous,
            by_male,
            by_female,
        })
    }

    pub fn pairs(&self) -> &[WordPair] {
        &self.pairs
    }

    pub fn ambiguous_rules(&self) -> &[AmbiguousRule] {
        &self.ambiguous
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn ambiguous_rule(&self, lower: &str, direction: Direction) -> Option<&AmbiguousRule> {
        self.ambiguous
            .iter()
            .find(|r| r.direction == direction && r.surface == lower)
    }

    fn is_period_form(&self, lower: &str) -> bool {
        self.by_male.contains_key(lower) || self.by_female.contains_key(lower)
    }

    /// True when `lower` is replaced by a swap in `direction`.
    pub fn is_source_form(&self, lower: &str, direction: Direction) -> bool {
        self.ambiguous_rule(lower, direction).is_some()
            || match direction {
                Direction::MaleToFemale => self.by_male.contains_key(lower),
                Direction::FemaleToMale => self.by_female.contains_key(lower),
            }
    }

    pub fn is_male_form(&self, lower: &str) -> bool {
        self.is_source_form(lower, Direction::MaleToFemale)
    }

    pub fn is_female_form(&self, lower: &str) -> bool {
        self.is_source_form(lower, Direction::FemaleToMale)
    }

    /// Replacement for a lowercased surface, with the stored casing of the
    /// counterpart. Ambiguous rules take precedence over the pair table.
    fn replacement(
        &self,
        lower: &str,
        direction: Direction,
        next_is_alpha: bool,
    ) -> Option<(String, SwapRule)> {
        if let Some(rule) = self.ambiguous_rule(lower, direction) {
            let pick = match rule.rule {
                ContextRule::NextAlphabetic if !next_is_alpha => &rule.replacement_b,
                _ => &rule.replacement_a,
            };
            return Some((pick.clone(), SwapRule::AmbiguousHeuristic));
        }
        match direction {
            Direction::MaleToFemale => self
                .by_male
                .get(lower)
                .map(|&i| (self.pairs[i].female.clone(), SwapRule::Exact)),
            Direction::FemaleToMale => self
                .by_female
                .get(lower)
                .map(|&i| (self.pairs[i].male.clone(), SwapRule::Exact)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    start: usize,
    end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Word-token spans over `text`, with lexicon-aware title periods.
fn word_spans(text: &str, lexicon: &GenderLexicon) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        if !is_word_char(c) {
            continue;
        }
        let mut end = start + c.len_utf8();
        while let Some(&(i, c)) = chars.peek() {
            if is_word_char(c) {
                end = i + c.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        if text[end..].starts_with('.') {
            let with_period = text[start..end + 1].to_lowercase();
            if lexicon.is_period_form(&with_period) {
                end += 1;
                chars.next();
            }
        }
        spans.push(Span { start, end });
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CaseClass {
    Lower,
    Capitalized,
    Upper,
    Mixed,
}

fn case_class(token: &str) -> CaseClass {
    let letters: Vec<char> = token.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.iter().all(|c| !c.is_uppercase()) {
        return CaseClass::Lower;
    }
    let first_upper = letters.first().is_some_and(|c| c.is_uppercase());
    let rest_lower = letters[1..].iter().all(|c| !c.is_uppercase());
    if first_upper && rest_lower {
        CaseClass::Capitalized
    } else if letters.iter().all(|c| !c.is_lowercase()) {
        CaseClass::Upper
    } else {
        CaseClass::Mixed
    }
}

fn apply_case(replacement: &str, class: CaseClass) -> String {
    match class {
        CaseClass::Lower => replacement.to_lowercase(),
        CaseClass::Upper => replacement.to_uppercase(),
        CaseClass::Capitalized => {
            let lower = replacement.to_lowercase();
            let mut chars = lower.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars).collect(),
                None => String::new(),
            }
        }
        CaseClass::Mixed => replacement.to_string(),
    }
}

/// Replaces every whole-word source-direction form with its counterpart.
pub fn swap(text: &str, direction: Direction, lexicon: &GenderLexicon) -> SwapResult {
    let spans = word_spans(text, lexicon);
    let mut output = String::with_capacity(text.len() + 16);
    let mut substitutions = Vec::new();
    let mut cursor = 0;

    for (position, span) in spans.iter().enumerate() {
        let token = &text[span.start..span.end];
        let lower = token.to_lowercase();
        let next_is_alpha = text[span.end..]
            .chars()
            .find(|c| !c.is_whitespace())
            .is_some_and(char::is_alphabetic);
        let Some((stored, rule)) = lexicon.replacement(&lower, direction, next_is_alpha) else {
            continue;
        };
        let replacement = apply_case(&stored, case_class(token));
        output.push_str(&text[cursor..span.start]);
        output.push_str(&replacement);
        cursor = span.end;
        substitutions.push(Substitution {
            position,
            original: token.to_string(),
            replacement,
            rule,
        });
    }
    output.push_str(&text[cursor..]);

    let ambiguous_count = substitutions
        .iter()
        .filter(|s| s.rule == SwapRule::AmbiguousHeuristic)
        .count();
    SwapResult {
        output_text: output,
        substitutions,
        ambiguous_count,
    }
}

/// Case-insensitive whole-word counts of male and female forms.
pub fn gender_term_counts(text: &str, lexicon: &GenderLexicon) -> TermCounts {
    let mut counts = TermCounts::default();
    for span in word_spans(text, lexicon) {
        let lower = text[span.start..span.end].to_lowercase();
        counts.total_tokens += 1;
        if lexicon.is_male_form(&lower) {
            counts.male += 1;
        } else if lexicon.is_female_form(&lower) {
            counts.female += 1;
        }
    }
    counts
}

/// Number of word tokens in `text` under the lexicon's tokenization.
pub fn token_count(text: &str, lexicon: &GenderLexicon) -> usize {
    word_spans(text, lexicon).len()
}
