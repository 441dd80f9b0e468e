//! The nine pipeline stages and their on-disk artifacts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cfaudit_core::corpus::{self, CounterfactualPair, ScreenConfig, ScreenedCorpus};
use cfaudit_core::embedder::{
    self, Embedder, EmbeddingCache, GroupEmbeddings, MockEmbedder, RemoteEmbedder,
};
use cfaudit_core::http::ReqwestTransport;
use cfaudit_core::lexicon::{GenderLexicon, ReviewEntry};
use cfaudit_core::llmclient::{
    self, BatchError, Completer, FeedbackCache, FeedbackRecord, HttpCompleter, LlmError,
    MockCompleter,
};
use cfaudit_core::promptgen::{self, Condition, PromptJob, TemplateSet};
use cfaudit_core::report::{self, ConditionFamily, HistogramPlot, ResultLabels, TsnePlot};
use cfaudit_core::stats::{self, DistanceMetric, MetricKind, PermutationConfig, PermutationResult};
use cfaudit_core::textstats::{self, ResourceLexicons, TextStatsRecord};
use cfaudit_core::tsne::{self, TsneConfig, TsneResult};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Effective;
use crate::CliError;

pub const SCREENED: &str = "screened.json";
pub const PAIRS: &str = "pairs.json";
pub const REVIEW: &str = "review.json";
pub const PLAN: &str = "plan.jsonl";
pub const FEEDBACK: &str = "feedback.jsonl";
pub const EMBEDDINGS: &str = "embeddings.json";
pub const STATS: &str = "stats.json";
pub const TSNE_DIR: &str = "tsne";
pub const TEXTSTATS: &str = "textstats.json";
pub const REPORT_DIR: &str = "report";
pub const RESULTS_CSV: &str = "report/results.csv";
pub const RESULTS_JSON: &str = "report/results.json";
pub const TEXTSTATS_CSV: &str = "report/textstats.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Screen,
    Counterfact,
    Plan,
    Generate,
    Embed,
    Stats,
    Tsne,
    Textstats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Screen,
        Stage::Counterfact,
        Stage::Plan,
        Stage::Generate,
        Stage::Embed,
        Stage::Stats,
        Stage::Tsne,
        Stage::Textstats,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Screen => "screen",
            Stage::Counterfact => "counterfact",
            Stage::Plan => "plan",
            Stage::Generate => "generate",
            Stage::Embed => "embed",
            Stage::Stats => "stats",
            Stage::Tsne => "tsne",
            Stage::Textstats => "textstats",
            Stage::Report => "report",
        }
    }
}

/// Shared state for one invocation.
pub struct Ctx<'a> {
    pub eff: &'a Effective,
    pub run_dir: PathBuf,
    lexicon: Option<Arc<GenderLexicon>>,
}

impl<'a> Ctx<'a> {
    pub fn new(eff: &'a Effective) -> Self {
        Self {
            eff,
            run_dir: eff.run_dir(),
            lexicon: None,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn require(&self, rel: &str, stage: Stage) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact {
                path: p,
                stage: stage.name(),
            })
        }
    }

    fn lexicon(&mut self) -> Result<Arc<GenderLexicon>, CliError> {
        if let Some(l) = &self.lexicon {
            return Ok(l.clone());
        }
        let lex = match &self.eff.config.corpus.lexicon {
            Some(p) => GenderLexicon::load(self.eff.resolve(p))
                .map_err(|e| CliError::Validation(e.to_string()))?,
            None => GenderLexicon::shipped(),
        };
        let lex = Arc::new(lex);
        self.lexicon = Some(lex.clone());
        Ok(lex)
    }

    fn cache_root(&self) -> PathBuf {
        self.eff.resolve(&self.eff.config.run_root).join("cache")
    }
}

/// Summary returned by a stage (also embedded in its manifest).
#[derive(Debug, Clone, Default, Serialize)]
pub struct StageOutcome {
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

#[derive(Debug, Serialize)]
struct FileDigest {
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    stage: &'static str,
    tool_version: &'static str,
    config_hash: String,
    seed: u64,
    mock: bool,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    summary: &'a serde_json::Value,
    config: &'a crate::Config,
}

fn digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::failed(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    report::write_file(path, text).map_err(|e| CliError::failed("writing artifact", e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = report::to_json(value).map_err(|e| CliError::failed("serializing", e))?;
    write_text(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::failed(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::failed(format!("parsing {}", path.display()), e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| CliError::failed("serializing", e))?);
        out.push('\n');
    }
    write_text(path, &out)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::failed(format!("reading {}", path.display()), e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line =
                line.map_err(|e| CliError::failed(format!("reading {}", path.display()), e))?;
            serde_json::from_str(&line).map_err(|e| {
                CliError::failed(format!("parsing {} line {}", path.display(), i + 1), e)
            })
        })
        .collect()
}

fn write_manifest(
    ctx: &Ctx,
    stage: Stage,
    inputs: &[PathBuf],
    outcome: &StageOutcome,
) -> Result<(), CliError> {
    let rel = |p: &Path| {
        p.strip_prefix(&ctx.run_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    let digests = |paths: Vec<PathBuf>| -> Result<Vec<FileDigest>, CliError> {
        paths
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    file: rel(p),
                    sha256: digest(p)?,
                })
            })
            .collect()
    };
    let outputs: Vec<PathBuf> = outcome.outputs.iter().map(|o| ctx.path(o)).collect();
    let manifest = Manifest {
        stage: stage.name(),
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: ctx.eff.config_hash(),
        seed: ctx.eff.config.seed,
        mock: ctx.eff.config.mock,
        inputs: digests(inputs.to_vec())?,
        outputs: digests(outputs)?,
        summary: &outcome.summary,
        config: &ctx.eff.config,
    };
    write_json(
        &ctx.path(&format!("{}.manifest.json", stage.name())),
        &manifest,
    )
}

pub fn run_stage(ctx: &mut Ctx, stage: Stage) -> Result<StageOutcome, CliError> {
    std::fs::create_dir_all(&ctx.run_dir)
        .map_err(|e| CliError::failed("creating run directory", e))?;
    let (inputs, outcome) = match stage {
        Stage::Screen => screen(ctx)?,
        Stage::Counterfact => counterfact(ctx)?,
        Stage::Plan => plan(ctx)?,
        Stage::Generate => generate(ctx)?,
        Stage::Embed => embed(ctx)?,
        Stage::Stats => stats_stage(ctx)?,
        Stage::Tsne => tsne_stage(ctx)?,
        Stage::Textstats => textstats_stage(ctx)?,
        Stage::Report => report_stage(ctx)?,
    };
    write_manifest(ctx, stage, &inputs, &outcome)?;
    log::info!("{} done: {}", stage.name(), outcome.summary);
    Ok(outcome)
}

pub fn run_all(ctx: &mut Ctx) -> Result<(), CliError> {
    for stage in Stage::ALL {
        run_stage(ctx, stage)?;
    }
    Ok(())
}

type StageResult = Result<(Vec<PathBuf>, StageOutcome), CliError>;
type ModelGroups = BTreeMap<String, BTreeMap<Condition, GroupEmbeddings>>;

fn screen(ctx: &mut Ctx) -> StageResult {
    let c = &ctx.eff.config;
    let corpus_path = ctx.eff.resolve(&c.corpus.path);
    if !corpus_path.exists() {
        return Err(CliError::Validation(format!(
            "corpus file {} not found",
            corpus_path.display()
        )));
    }
    let ingested = corpus::ingest_essays(&corpus_path, &c.corpus.mapping())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let cfg = ScreenConfig {
        per_group_cap: c.corpus.per_group_cap,
        require_exclusive: c.corpus.require_exclusive,
        min_tokens: c.corpus.min_tokens,
        selection: c.corpus.selection(c.seed)?,
    };
    let lex = ctx.lexicon()?;
    let screened = corpus::screen_and_classify(&ingested.essays, &lex, &cfg)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    write_json(&ctx.path(SCREENED), &screened)?;
    Ok((
        vec![corpus_path],
        StageOutcome {
            outputs: vec![SCREENED.into()],
            summary: serde_json::json!({
                "ingested": ingested.essays.len(),
                "skipped_empty": ingested.skipped_empty,
                "group_m": screened.group_m.len(),
                "group_f": screened.group_f.len(),
                "excluded": screened.excluded.len(),
                "gendered_word_ratio": report::round_sig(screened.gendered_word_ratio),
                "warnings": screened.warnings,
            }),
        },
    ))
}

fn counterfact(ctx: &mut Ctx) -> StageResult {
    let input = ctx.require(SCREENED, Stage::Screen)?;
    let screened: ScreenedCorpus = read_json(&input)?;
    let lex = ctx.lexicon()?;
    let pairs =
        corpus::build_pairs(&screened, &lex).map_err(|e| CliError::Validation(e.to_string()))?;
    let review: Vec<ReviewEntry> = pairs
        .iter()
        .flat_map(|p| p.substitution_log.review_entries(&p.source.essay_id))
        .collect();
    let substitutions: usize = pairs
        .iter()
        .map(|p| p.substitution_log.substitutions.len())
        .sum();
    write_json(&ctx.path(PAIRS), &pairs)?;
    write_json(&ctx.path(REVIEW), &review)?;
    Ok((
        vec![input],
        StageOutcome {
            outputs: vec![PAIRS.into(), REVIEW.into()],
            summary: serde_json::json!({
                "pairs": pairs.len(),
                "substitutions": substitutions,
                "needs_review": review.len(),
            }),
        },
    ))
}

/// One line of `plan.jsonl`: the plan entry plus the exact prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedJob {
    pub job_id: String,
    pub essay_id: String,
    pub condition: Condition,
    pub model_id: String,
    pub template_version: String,
    pub prompt: String,
}

impl PlannedJob {
    fn job(&self) -> PromptJob {
        PromptJob {
            job_id: self.job_id.clone(),
            essay_id: self.essay_id.clone(),
            condition: self.condition,
            model_id: self.model_id.clone(),
            rendered_prompt: self.prompt.clone(),
        }
    }
}

fn templates(ctx: &Ctx) -> Result<TemplateSet, CliError> {
    let t = match &ctx.eff.config.prompts.templates {
        Some(p) => TemplateSet::load(ctx.eff.resolve(p))
            .map_err(|e| CliError::Validation(e.to_string()))?,
        None => TemplateSet::default(),
    };
    t.validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(t)
}

fn plan(ctx: &mut Ctx) -> StageResult {
    let screened_path = ctx.require(SCREENED, Stage::Screen)?;
    let pairs_path = ctx.require(PAIRS, Stage::Counterfact)?;
    let screened: ScreenedCorpus = read_json(&screened_path)?;
    let pairs: Vec<CounterfactualPair> = read_json(&pairs_path)?;
    let templates = templates(ctx)?;
    let jobs = promptgen::plan_experiment(&screened, &pairs, &ctx.eff.model_ids(), &templates)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let planned: Vec<PlannedJob> = jobs
        .iter()
        .map(|j| PlannedJob {
            job_id: j.job_id.clone(),
            essay_id: j.essay_id.clone(),
            condition: j.condition,
            model_id: j.model_id.clone(),
            template_version: templates.version.clone(),
            prompt: j.rendered_prompt.clone(),
        })
        .collect();
    write_jsonl(&ctx.path(PLAN), &planned)?;
    let mut by_condition: BTreeMap<&str, usize> = BTreeMap::new();
    for j in &jobs {
        *by_condition.entry(j.condition.as_str()).or_default() += 1;
    }
    Ok((
        vec![screened_path, pairs_path],
        StageOutcome {
            outputs: vec![PLAN.into()],
            summary: serde_json::json!({
                "jobs": jobs.len(),
                "template_version": templates.version,
                "by_condition": by_condition,
            }),
        },
    ))
}

/// Dispatches each job to the completer configured for its model.
struct Router(HashMap<String, Box<dyn Completer>>);

impl Completer for Router {
    fn complete(&self, job: &PromptJob) -> Result<FeedbackRecord, LlmError> {
        self.0
            .get(&job.model_id)
            .ok_or_else(|| LlmError::Config(format!("no endpoint for model {}", job.model_id)))?
            .complete(job)
    }
}

fn generate(ctx: &mut Ctx) -> StageResult {
    let plan_path = ctx.require(PLAN, Stage::Plan)?;
    let planned: Vec<PlannedJob> = read_jsonl(&plan_path)?;
    let jobs: Vec<PromptJob> = planned.iter().map(PlannedJob::job).collect();
    let c = &ctx.eff.config;
    let (completer, cache_dir): (Box<dyn Completer>, PathBuf) = if c.mock {
        let lex = ctx.lexicon()?;
        let mode = match c.mock_mode {
            llmclient::MockMode::Biased => "biased",
            llmclient::MockMode::Unbiased => "unbiased",
        };
        (
            Box::new(MockCompleter {
                mode: c.mock_mode,
                seed: c.seed,
                lexicon: lex,
            }),
            ctx.cache_root()
                .join(format!("llm-mock-{mode}-seed{}", c.seed)),
        )
    } else {
        let transport = Arc::new(ReqwestTransport::new());
        let mut routes: HashMap<String, Box<dyn Completer>> = HashMap::new();
        for m in &c.models {
            let completer = HttpCompleter::new(m.endpoint()?, transport.clone())
                .map_err(|e| CliError::Validation(e.to_string()))?;
            routes.insert(m.id.clone(), Box::new(completer));
        }
        (Box::new(Router(routes)), ctx.cache_root().join("llm-live"))
    };
    let mut cache = FeedbackCache::open(&cache_dir)
        .map_err(|e| CliError::failed("opening response cache", e))?;
    let (records, batch) = match llmclient::run_batch(
        &jobs,
        completer.as_ref(),
        &mut cache,
        c.generation.parallelism,
    ) {
        Ok(r) => r,
        Err(BatchError::EmptyPlan) => return Err(CliError::Validation("plan is empty".into())),
        Err(e @ BatchError::Partial { .. }) => return Err(CliError::PartialBatch(e.to_string())),
    };
    write_jsonl(&ctx.path(FEEDBACK), &records)?;
    Ok((
        vec![plan_path],
        StageOutcome {
            outputs: vec![FEEDBACK.into()],
            summary: serde_json::json!({
                "records": records.len(),
                "cache_hits": batch.cache_hits,
                "executed": batch.executed,
            }),
        },
    ))
}

/// Where each group's vectors live in the embedding cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub embedder: String,
    pub dim: Option<usize>,
    /// model id → condition → sorted (essay id, cache key).
    pub groups: BTreeMap<String, BTreeMap<Condition, Vec<(String, String)>>>,
}

fn embedder(ctx: &Ctx) -> Result<Box<dyn Embedder>, CliError> {
    let c = &ctx.eff.config;
    if c.mock {
        return Ok(Box::new(MockEmbedder::new(c.embedding.mock_dim)));
    }
    let remote = c.embedding.remote.clone().ok_or_else(|| {
        CliError::Validation("embedding.remote is required outside mock mode".into())
    })?;
    let e = RemoteEmbedder::new(remote, Arc::new(ReqwestTransport::new()))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(Box::new(e))
}

fn open_embedding_cache(ctx: &Ctx) -> Result<EmbeddingCache, CliError> {
    EmbeddingCache::open(ctx.cache_root().join("embeddings"))
        .map_err(|e| CliError::failed("opening embedding cache", e))
}

fn embed(ctx: &mut Ctx) -> StageResult {
    let feedback_path = ctx.require(FEEDBACK, Stage::Generate)?;
    let records: Vec<FeedbackRecord> = read_jsonl(&feedback_path)?;
    let embedder = embedder(ctx)?;
    let model_id = embedder.model_id();
    let mut cache = open_embedding_cache(ctx)?;
    let mut grouped: BTreeMap<(String, Condition), Vec<FeedbackRecord>> = BTreeMap::new();
    for r in records {
        grouped
            .entry((r.model_id.clone(), r.condition))
            .or_default()
            .push(r);
    }
    let mut index = EmbeddingIndex {
        embedder: model_id.clone(),
        dim: None,
        groups: BTreeMap::new(),
    };
    let (mut hits, mut calls) = (0, 0);
    for ((model, condition), recs) in &grouped {
        let (group, s) = embedder::embed_group(
            recs,
            embedder.as_ref(),
            &mut cache,
            ctx.eff.config.embedding.parallelism,
        )
        .map_err(|e| CliError::failed(format!("embedding {model}/{}", condition.as_str()), e))?;
        hits += s.cache_hits;
        calls += s.calls;
        if let (Some(a), Some(b)) = (index.dim, group.dim()) {
            if a != b {
                return Err(CliError::failed(
                    "embedding",
                    format!("dimension changed from {a} to {b}"),
                ));
            }
        }
        index.dim = index.dim.or(group.dim());
        let by_id: HashMap<&str, &FeedbackRecord> =
            recs.iter().map(|r| (r.essay_id.as_str(), r)).collect();
        let keys = group
            .essay_ids()
            .map(|id| {
                (
                    id.to_string(),
                    embedder::cache_key(&model_id, &by_id[id].response_text),
                )
            })
            .collect();
        index
            .groups
            .entry(model.clone())
            .or_default()
            .insert(*condition, keys);
    }
    write_json(&ctx.path(EMBEDDINGS), &index)?;
    Ok((
        vec![feedback_path],
        StageOutcome {
            outputs: vec![EMBEDDINGS.into()],
            summary: serde_json::json!({
                "embedder": model_id,
                "dim": index.dim,
                "groups": grouped.len(),
                "cache_hits": hits,
                "calls": calls,
            }),
        },
    ))
}

fn load_groups(ctx: &Ctx) -> Result<(PathBuf, ModelGroups), CliError> {
    let path = ctx.require(EMBEDDINGS, Stage::Embed)?;
    let index: EmbeddingIndex = read_json(&path)?;
    let cache = open_embedding_cache(ctx)?;
    let mut out = BTreeMap::new();
    for (model, conditions) in index.groups {
        let mut per = BTreeMap::new();
        for (condition, keys) in conditions {
            let records = keys
                .into_iter()
                .map(|(id, key)| {
                    cache.get(&key).cloned().map(|v| (id, v)).ok_or_else(|| {
                        CliError::MissingArtifact {
                            path: ctx.cache_root().join("embeddings"),
                            stage: Stage::Embed.name(),
                        }
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let g = GroupEmbeddings::new(condition.group_label(), records)
                .map_err(|e| CliError::failed("loading embeddings", e))?;
            per.insert(condition, g);
        }
        out.insert(model, per);
    }
    Ok((path, out))
}

/// (family, comparison label, left condition, right condition).
pub const COMPARISONS: [(ConditionFamily, &str, Condition, Condition); 6] = [
    (
        ConditionFamily::Implicit,
        "M vs M-F",
        Condition::ImplicitOriginalM,
        Condition::ImplicitCounterfactualMF,
    ),
    (
        ConditionFamily::Implicit,
        "F vs F-M",
        Condition::ImplicitOriginalF,
        Condition::ImplicitCounterfactualFM,
    ),
    (
        ConditionFamily::Explicit,
        "M vs F",
        Condition::ExplicitM,
        Condition::ExplicitF,
    ),
    (
        ConditionFamily::Explicit,
        "M vs N",
        Condition::ExplicitM,
        Condition::ExplicitN,
    ),
    (
        ConditionFamily::Explicit,
        "F vs N",
        Condition::ExplicitF,
        Condition::ExplicitN,
    ),
    (
        ConditionFamily::Baseline,
        "M vs M'",
        Condition::ImplicitOriginalM,
        Condition::BaselineMPrime,
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub labels: ResultLabels,
    pub result: PermutationResult,
}

/// Keeps only essays present in both groups so pairs line up by id.
fn align(x: &GroupEmbeddings, y: &GroupEmbeddings) -> (GroupEmbeddings, GroupEmbeddings) {
    let xs: HashSet<&str> = x.essay_ids().collect();
    let common: HashSet<&str> = y.essay_ids().filter(|id| xs.contains(id)).collect();
    (x.restricted_to(&common), y.restricted_to(&common))
}

fn stats_stage(ctx: &mut Ctx) -> StageResult {
    let (input, groups) = load_groups(ctx)?;
    let c = &ctx.eff.config;
    let perm = PermutationConfig {
        permutations: c.stats.permutations,
        seed: c.seed,
        histogram_bins: c.stats.histogram_bins,
    };
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (model, per) in &groups {
        for (family, comparison, left, right) in COMPARISONS {
            let (Some(x), Some(y)) = (per.get(&left), per.get(&right)) else {
                skipped.push(format!("{model}/{comparison}: group missing"));
                continue;
            };
            let (x, y) = align(x, y);
            if x.len() < 2 {
                skipped.push(format!("{model}/{comparison}: fewer than 2 aligned pairs"));
                continue;
            }
            for kind in &c.stats.metrics {
                let metric = match kind {
                    MetricKind::Mahalanobis => DistanceMetric::Mahalanobis(c.stats.shrinkage()),
                    other => DistanceMetric::from_kind(*other),
                };
                let result = stats::permutation_test(&x, &y, metric, &perm)
                    .map_err(|e| CliError::failed(format!("{model}/{comparison}/{kind}"), e))?;
                entries.push(StatsEntry {
                    labels: ResultLabels {
                        condition: family,
                        comparison: comparison.to_string(),
                        model_id: model.clone(),
                    },
                    result,
                });
            }
        }
    }
    for s in &skipped {
        log::warn!("skipped {s}");
    }
    write_json(&ctx.path(STATS), &entries)?;
    Ok((
        vec![input],
        StageOutcome {
            outputs: vec![STATS.into()],
            summary: serde_json::json!({
                "tests": entries.len(),
                "permutations": perm.permutations,
                "rng": stats::RNG_NAME,
                "skipped": skipped,
            }),
        },
    ))
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect::<String>()
        .split('-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

/// Lowers perplexity and k when a group set is too small for the configured
/// values; returns `None` when no valid setting exists.
fn fit_tsne_config(ctx: &Ctx, n: usize) -> Option<(TsneConfig, Vec<String>)> {
    let t = &ctx.eff.config.tsne;
    let mut cfg = TsneConfig {
        perplexity: t.perplexity,
        iterations: t.iterations,
        trustworthiness_k: t.trustworthiness_k,
        seed: ctx.eff.config.seed,
        ..TsneConfig::default()
    };
    let mut notes = Vec::new();
    let max_perplexity = (n as f64 - 1.0) / 3.0;
    if cfg.perplexity >= max_perplexity {
        let lowered = (max_perplexity * 0.95 * 100.0).floor() / 100.0;
        if lowered <= 1.0 {
            return None;
        }
        notes.push(format!(
            "perplexity lowered from {} to {lowered} for n={n}",
            cfg.perplexity
        ));
        cfg.perplexity = lowered;
    }
    let max_k = (n - 1) / 2;
    if cfg.trustworthiness_k > max_k {
        if max_k == 0 {
            return None;
        }
        notes.push(format!(
            "trustworthiness k lowered from {} to {max_k} for n={n}",
            cfg.trustworthiness_k
        ));
        cfg.trustworthiness_k = max_k;
    }
    cfg.check(n).ok().map(|_| (cfg, notes))
}

fn tsne_stage(ctx: &mut Ctx) -> StageResult {
    let (input, groups) = load_groups(ctx)?;
    let families: [(ConditionFamily, &[Condition]); 2] = [
        (
            ConditionFamily::Implicit,
            &[
                Condition::ImplicitOriginalM,
                Condition::ImplicitCounterfactualMF,
                Condition::ImplicitOriginalF,
                Condition::ImplicitCounterfactualFM,
            ],
        ),
        (
            ConditionFamily::Explicit,
            &[
                Condition::ExplicitM,
                Condition::ExplicitF,
                Condition::ExplicitN,
            ],
        ),
    ];
    let mut outputs = Vec::new();
    let mut notes = Vec::new();
    let mut diagnostics = Vec::new();
    for (model, per) in &groups {
        for (family, conditions) in &families {
            let selected: Vec<GroupEmbeddings> = conditions
                .iter()
                .filter_map(|c| per.get(c).cloned())
                .collect();
            let n: usize = selected.iter().map(GroupEmbeddings::len).sum();
            let Some((cfg, mut adjusted)) = fit_tsne_config(ctx, n) else {
                notes.push(format!(
                    "{model}/{}: skipped, {n} points is too few",
                    family.as_str()
                ));
                continue;
            };
            notes.append(&mut adjusted);
            let result = tsne::tsne_groups(&selected, &cfg)
                .map_err(|e| CliError::failed(format!("t-SNE {model}/{}", family.as_str()), e))?;
            let rel = format!("{TSNE_DIR}/{}-{}.json", slug(model), family.as_str());
            write_json(&ctx.path(&rel), &result)?;
            diagnostics.push(serde_json::json!({
                "model_id": model,
                "condition": family.as_str(),
                "kl_final": report::round_sig(result.kl_final),
                "trustworthiness": report::round_sig(result.trustworthiness),
                "trustworthiness_k": result.trustworthiness_k,
                "perplexity": cfg.perplexity,
            }));
            outputs.push(rel);
        }
    }
    for n in &notes {
        log::warn!("{n}");
    }
    Ok((
        vec![input],
        StageOutcome {
            outputs,
            summary: serde_json::json!({ "projections": diagnostics, "notes": notes }),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextStatsArtifact {
    pub patterns_version: String,
    pub records: Vec<(String, TextStatsRecord)>,
    pub summaries: BTreeMap<String, Vec<textstats::GroupSummary>>,
}

fn textstats_stage(ctx: &mut Ctx) -> StageResult {
    let feedback_path = ctx.require(FEEDBACK, Stage::Generate)?;
    let records: Vec<FeedbackRecord> = read_jsonl(&feedback_path)?;
    let t = &ctx.eff.config.textstats;
    let resolve = |p: &Option<PathBuf>| p.as_ref().map(|p| ctx.eff.resolve(p));
    let (awl, norms, patterns) = (
        resolve(&t.academic_words),
        resolve(&t.concreteness_norms),
        resolve(&t.patterns),
    );
    let res = ResourceLexicons::load(awl.as_deref(), norms.as_deref(), patterns.as_deref())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut inputs = vec![feedback_path];
    inputs.extend([awl, norms, patterns].into_iter().flatten());

    let analyzed: Vec<(String, TextStatsRecord)> = records
        .iter()
        .map(|r| {
            (
                r.model_id.clone(),
                textstats::analyze_text(
                    &r.essay_id,
                    r.condition.group_label(),
                    &r.response_text,
                    &res,
                ),
            )
        })
        .collect();
    let mut summaries = BTreeMap::new();
    let mut by_model: BTreeMap<&str, Vec<TextStatsRecord>> = BTreeMap::new();
    for (model, rec) in &analyzed {
        by_model.entry(model).or_default().push(rec.clone());
    }
    for (model, recs) in by_model {
        let s = textstats::aggregate_groups(&recs)
            .map_err(|e| CliError::failed("aggregating text statistics", e))?;
        summaries.insert(model.to_string(), s);
    }
    let artifact = TextStatsArtifact {
        patterns_version: res.patterns.version.clone(),
        records: analyzed,
        summaries,
    };
    write_json(&ctx.path(TEXTSTATS), &artifact)?;
    Ok((
        inputs,
        StageOutcome {
            outputs: vec![TEXTSTATS.into()],
            summary: serde_json::json!({
                "records": artifact.records.len(),
                "patterns_version": artifact.patterns_version,
            }),
        },
    ))
}

fn report_stage(ctx: &mut Ctx) -> StageResult {
    let stats_path = ctx.require(STATS, Stage::Stats)?;
    let text_path = ctx.require(TEXTSTATS, Stage::Textstats)?;
    let entries: Vec<StatsEntry> = read_json(&stats_path)?;
    let text: TextStatsArtifact = read_json(&text_path)?;
    let pairs: Vec<(ResultLabels, PermutationResult)> = entries
        .iter()
        .map(|e| (e.labels.clone(), e.result.clone()))
        .collect();
    let rows = if pairs.is_empty() {
        Vec::new()
    } else {
        report::build_results_table(&pairs)
            .map_err(|e| CliError::failed("building results table", e))?
    };
    let fail = |e: report::ReportError| CliError::failed("formatting report", e);
    write_text(
        &ctx.path(RESULTS_CSV),
        &report::results_to_csv(&rows).map_err(fail)?,
    )?;
    write_text(
        &ctx.path(RESULTS_JSON),
        &report::results_to_json(&rows).map_err(fail)?,
    )?;
    let text_rows: Vec<report::TextStatsRow> = text
        .summaries
        .iter()
        .flat_map(|(model, s)| report::textstats_rows(model, s))
        .collect();
    write_text(
        &ctx.path(TEXTSTATS_CSV),
        &report::textstats_to_csv(&text_rows).map_err(fail)?,
    )?;
    let mut outputs = vec![
        RESULTS_CSV.to_string(),
        RESULTS_JSON.to_string(),
        TEXTSTATS_CSV.to_string(),
    ];
    let mut inputs = vec![stats_path, text_path];

    for e in &entries {
        let rel = format!(
            "{REPORT_DIR}/plots/histogram-{}-{}-{}-{}.json",
            slug(&e.labels.model_id),
            e.labels.condition.as_str(),
            slug(&e.labels.comparison.replace('\'', "prime")),
            e.result.metric
        );
        write_json(&ctx.path(&rel), &HistogramPlot::new(&e.labels, &e.result))?;
        outputs.push(rel);
    }
    let tsne_dir = ctx.path(TSNE_DIR);
    if tsne_dir.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&tsne_dir)
            .map_err(|e| CliError::failed("listing t-SNE results", e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let result: TsneResult = read_json(&f)?;
            let stem = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let rel = format!("{REPORT_DIR}/plots/tsne-{stem}.json");
            write_json(&ctx.path(&rel), &TsnePlot::new(stem, &result))?;
            outputs.push(rel);
            inputs.push(f);
        }
    }
    Ok((
        inputs,
        StageOutcome {
            outputs,
            summary: serde_json::json!({ "rows": rows.len(), "textstats_rows": text_rows.len() }),
        },
    ))
}
