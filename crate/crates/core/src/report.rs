//! Result tables and plot-data files.
//!
//! Every float written by this module is first rounded to six significant
//! digits, so emitted files are stable and parse back to identical values.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{EffectBand, MetricKind, PermutationResult};
use crate::textstats::GroupSummary;
use crate::tsne::TsneResult;

pub const RESULTS_SCHEMA: &str = "cfaudit.results/v1";
pub const HISTOGRAM_SCHEMA: &str = "cfaudit.histogram/v1";
pub const TSNE_SCHEMA: &str = "cfaudit.tsne/v1";
pub const TEXTSTATS_SCHEMA: &str = "cfaudit.textstats/v1";
pub const SIGNIFICANT_DIGITS: usize = 6;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no results to tabulate")]
    NoResults,
    #[error("duplicate result row {0}")]
    DuplicateKey(String),
    #[error("expected schema {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
}

/// Rounds to six significant digits (non-finite values pass through).
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("formatted float parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionFamily {
    Implicit,
    Explicit,
    Baseline,
}

impl ConditionFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionFamily::Implicit => "implicit",
            ConditionFamily::Explicit => "explicit",
            ConditionFamily::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultLabels {
    pub condition: ConditionFamily,
    /// e.g. "M vs M-F".
    pub comparison: String,
    pub model_id: String,
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

pub fn p_display(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: ConditionFamily,
    pub comparison: String,
    pub model_id: String,
    pub metric: MetricKind,
    pub n: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub t_obs: f64,
    pub t_perm_mean: f64,
    pub t_obs_minus_mean: f64,
    pub p: f64,
    pub p_display: String,
    pub significance_stars: String,
    pub d_pairs: f64,
    pub effect_band: EffectBand,
    pub z_perm: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn from_result(labels: &ResultLabels, r: &PermutationResult) -> Self {
        Self {
            condition: labels.condition,
            comparison: labels.comparison.clone(),
            model_id: labels.model_id.clone(),
            metric: r.metric,
            n: r.n,
            b: r.b,
            t_obs: round_sig(r.t_obs),
            t_perm_mean: round_sig(r.t_perm_mean),
            t_obs_minus_mean: round_sig(r.t_obs - r.t_perm_mean),
            p: round_sig(r.p_two_tailed),
            p_display: p_display(r.p_two_tailed),
            significance_stars: significance_stars(r.p_two_tailed).to_string(),
            d_pairs: round_sig(r.d_pairs),
            effect_band: EffectBand::of(r.d_pairs),
            z_perm: round_sig(r.z_perm),
            seed: r.seed,
        }
    }

    fn key(&self) -> (ConditionFamily, &str, &str, MetricKind) {
        (
            self.condition,
            &self.comparison,
            &self.model_id,
            self.metric,
        )
    }
}

/// One row per (condition, comparison, model, metric), in that sort order.
pub fn build_results_table(
    results: &[(ResultLabels, PermutationResult)],
) -> Result<Vec<ResultRow>, ReportError> {
    if results.is_empty() {
        return Err(ReportError::NoResults);
    }
    let mut rows: Vec<ResultRow> = results
        .iter()
        .map(|(l, r)| ResultRow::from_result(l, r))
        .collect();
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    let mut seen = BTreeSet::new();
    for row in &rows {
        if !seen.insert(row.key()) {
            return Err(ReportError::DuplicateKey(format!(
                "{}/{}/{}/{}",
                row.condition.as_str(),
                row.comparison,
                row.model_id,
                row.metric
            )));
        }
    }
    Ok(rows)
}

pub fn results_to_csv(rows: &[ResultRow]) -> Result<String, ReportError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(RESULT_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Header written even when there are no rows.
pub const RESULT_COLUMNS: [&str; 16] = [
    "condition",
    "comparison",
    "model_id",
    "metric",
    "n",
    "B",
    "t_obs",
    "t_perm_mean",
    "t_obs_minus_mean",
    "p",
    "p_display",
    "significance_stars",
    "d_pairs",
    "effect_band",
    "z_perm",
    "seed",
];

pub fn results_from_csv(text: &str) -> Result<Vec<ResultRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(ReportError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub schema: String,
    pub rows: Vec<ResultRow>,
}

pub fn results_to_json(rows: &[ResultRow]) -> Result<String, ReportError> {
    to_json(&ResultsDocument {
        schema: RESULTS_SCHEMA.to_string(),
        rows: rows.to_vec(),
    })
}

pub fn results_from_json(text: &str) -> Result<Vec<ResultRow>, ReportError> {
    let doc: ResultsDocument = serde_json::from_str(text)?;
    check_schema(&doc.schema, RESULTS_SCHEMA)?;
    Ok(doc.rows)
}

fn check_schema(found: &str, expected: &str) -> Result<(), ReportError> {
    if found != expected {
        return Err(ReportError::SchemaMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(path: impl AsRef<Path>, contents: &str) -> Result<(), ReportError> {
    let path = path.as_ref();
    let io = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(contents.as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPlot {
    pub schema: String,
    pub model_id: String,
    pub condition: ConditionFamily,
    pub comparison: String,
    pub metric: MetricKind,
    #[serde(rename = "B")]
    pub b: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub t_obs: f64,
    pub t_perm_mean: f64,
    pub p: f64,
    pub seed: u64,
}

impl HistogramPlot {
    pub fn new(labels: &ResultLabels, r: &PermutationResult) -> Self {
        Self {
            schema: HISTOGRAM_SCHEMA.to_string(),
            model_id: labels.model_id.clone(),
            condition: labels.condition,
            comparison: labels.comparison.clone(),
            metric: r.metric,
            b: r.b,
            bin_edges: r.histogram.edges.iter().map(|e| round_sig(*e)).collect(),
            counts: r.histogram.counts.clone(),
            t_obs: round_sig(r.t_obs),
            t_perm_mean: round_sig(r.t_perm_mean),
            p: round_sig(r.p_two_tailed),
            seed: r.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsnePlotPoint {
    pub essay_id: String,
    pub group_label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsnePlot {
    pub schema: String,
    pub title: String,
    pub points: Vec<TsnePlotPoint>,
    pub kl_final: f64,
    pub kl_history: Vec<(usize, f64)>,
    pub trustworthiness_k: usize,
    pub trustworthiness: f64,
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl TsnePlot {
    pub fn new(title: impl Into<String>, r: &TsneResult) -> Self {
        Self {
            schema: TSNE_SCHEMA.to_string(),
            title: title.into(),
            points: r
                .points
                .iter()
                .map(|p| TsnePlotPoint {
                    essay_id: p.essay_id.clone(),
                    group_label: p.group_label.clone(),
                    x: round_sig(p.x),
                    y: round_sig(p.y),
                })
                .collect(),
            kl_final: round_sig(r.kl_final),
            kl_history: r
                .kl_history
                .iter()
                .map(|c| (c.iteration, round_sig(c.kl)))
                .collect(),
            trustworthiness_k: r.trustworthiness_k,
            trustworthiness: round_sig(r.trustworthiness),
            perplexity: r.config.perplexity,
            iterations: r.config.iterations,
            seed: r.config.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextStatsRow {
    pub model_id: String,
    pub group_label: String,
    pub measure: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

pub fn textstats_rows(model_id: &str, summaries: &[GroupSummary]) -> Vec<TextStatsRow> {
    summaries
        .iter()
        .flat_map(|g| {
            crate::textstats::MEASURES.iter().map(move |m| {
                let s = &g.measures[*m];
                TextStatsRow {
                    model_id: model_id.to_string(),
                    group_label: g.group_label.clone(),
                    measure: m.to_string(),
                    n: s.n,
                    mean: s.mean.map(round_sig),
                    sd: s.sd.map(round_sig),
                }
            })
        })
        .collect()
}

pub const TEXTSTATS_COLUMNS: [&str; 6] = ["model_id", "group_label", "measure", "n", "mean", "sd"];

pub fn textstats_to_csv(rows: &[TextStatsRow]) -> Result<String, ReportError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(TEXTSTATS_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
