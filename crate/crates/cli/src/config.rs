//! Experiment configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use cfaudit_core::corpus::{ColumnMapping, Selection};
use cfaudit_core::embedder::RemoteEmbedConfig;
use cfaudit_core::llmclient::{MockMode, ModelEndpointConfig};
use cfaudit_core::stats::{MetricKind, Shrinkage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    /// Root for run directories, relative to the config file.
    #[serde(default = "default_run_root")]
    pub run_root: PathBuf,
    /// Offline mode: mock LLM and mock embedder.
    #[serde(default)]
    pub mock: bool,
    #[serde(default = "default_mock_mode")]
    pub mock_mode: MockMode,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub prompts: PromptSection,
    #[serde(default)]
    pub models: Vec<ModelSection>,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub tsne: TsneSection,
    #[serde(default)]
    pub textstats: TextStatsSection,
}

fn default_run_root() -> PathBuf {
    PathBuf::from("runs")
}

fn default_mock_mode() -> MockMode {
    MockMode::Biased
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_text_column")]
    pub text_column: String,
    #[serde(default)]
    pub topic_column: Option<String>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default = "default_cap")]
    pub per_group_cap: usize,
    #[serde(default)]
    pub require_exclusive: bool,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    /// "corpus-order" or "random" (seeded by the run seed).
    #[serde(default = "default_selection")]
    pub selection: String,
}

fn default_id_column() -> String {
    "essay_id".into()
}
fn default_text_column() -> String {
    "full_text".into()
}
fn default_cap() -> usize {
    300
}
fn default_min_tokens() -> usize {
    20
}
fn default_selection() -> String {
    "corpus-order".into()
}

impl CorpusSection {
    pub fn mapping(&self) -> ColumnMapping {
        ColumnMapping {
            id_column: self.id_column.clone(),
            text_column: self.text_column.clone(),
            topic_column: self.topic_column.clone(),
        }
    }

    pub fn selection(&self, seed: u64) -> Result<Selection, CliError> {
        match self.selection.as_str() {
            "corpus-order" => Ok(Selection::CorpusOrder),
            "random" => Ok(Selection::Random { seed }),
            other => Err(CliError::Validation(format!(
                "corpus.selection must be \"corpus-order\" or \"random\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    /// TOML template file; the built-in set is used when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub id: String,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Provider-side model name; defaults to `id`.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}

impl ModelSection {
    pub fn mock(id: &str) -> Self {
        Self {
            id: id.to_string(),
            base_url: None,
            model: None,
            api_key_env: None,
            temperature: None,
            max_tokens: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
        }
    }

    pub fn endpoint(&self) -> Result<ModelEndpointConfig, CliError> {
        let base_url = self.base_url.clone().ok_or_else(|| {
            CliError::Validation(format!(
                "model {} needs base_url outside mock mode",
                self.id
            ))
        })?;
        let mut cfg = ModelEndpointConfig::new(
            base_url,
            self.model.clone().unwrap_or_else(|| self.id.clone()),
        );
        cfg.api_key_env = self.api_key_env.clone();
        cfg.temperature = self.temperature;
        cfg.max_tokens = self.max_tokens;
        cfg.timeout_secs = self.timeout_secs;
        cfg.max_retries = self.max_retries;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    4
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            parallelism: default_parallelism(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Dimension of the offline hashing embedder.
    #[serde(default = "default_mock_dim")]
    pub mock_dim: usize,
    #[serde(default)]
    pub remote: Option<RemoteEmbedConfig>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_mock_dim() -> usize {
    cfaudit_core::embedder::DEFAULT_MOCK_DIM
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            mock_dim: default_mock_dim(),
            remote: None,
            parallelism: default_parallelism(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Fixed Mahalanobis λ; the trace-scaled default is used when absent.
    #[serde(default)]
    pub mahalanobis_lambda: Option<f64>,
}

fn default_metrics() -> Vec<MetricKind> {
    vec![MetricKind::Cosine, MetricKind::Euclidean]
}
fn default_permutations() -> usize {
    5000
}
fn default_bins() -> usize {
    cfaudit_core::stats::DEFAULT_HISTOGRAM_BINS
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            metrics: default_metrics(),
            permutations: default_permutations(),
            histogram_bins: default_bins(),
            mahalanobis_lambda: None,
        }
    }
}

impl StatsSection {
    pub fn shrinkage(&self) -> Shrinkage {
        self.mahalanobis_lambda
            .map_or(Shrinkage::Auto, Shrinkage::Fixed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneSection {
    #[serde(default = "default_perplexity")]
    pub perplexity: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_k")]
    pub trustworthiness_k: usize,
}

fn default_perplexity() -> f64 {
    30.0
}
fn default_iterations() -> usize {
    1000
}
fn default_k() -> usize {
    5
}

impl Default for TsneSection {
    fn default() -> Self {
        Self {
            perplexity: default_perplexity(),
            iterations: default_iterations(),
            trustworthiness_k: default_k(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextStatsSection {
    #[serde(default)]
    pub academic_words: Option<PathBuf>,
    #[serde(default)]
    pub concreteness_norms: Option<PathBuf>,
    #[serde(default)]
    pub patterns: Option<PathBuf>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mock: bool,
    pub models: Option<Vec<String>>,
    pub metrics: Option<Vec<MetricKind>>,
    pub permutations: Option<usize>,
    pub run_root: Option<PathBuf>,
}

/// A validated config with paths resolved against the config file directory.
#[derive(Debug, Clone)]
pub struct Effective {
    pub config: Config,
    pub base_dir: PathBuf,
}

impl Effective {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: Config = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::from_config(config, base_dir, overrides)
    }

    pub fn from_config(
        mut config: Config,
        base_dir: PathBuf,
        o: &Overrides,
    ) -> Result<Self, CliError> {
        if let Some(seed) = o.seed {
            config.seed = seed;
        }
        if o.mock {
            config.mock = true;
        }
        if let Some(models) = &o.models {
            let known: Vec<ModelSection> = config.models.clone();
            config.models = models
                .iter()
                .map(|id| {
                    known
                        .iter()
                        .find(|m| &m.id == id)
                        .cloned()
                        .unwrap_or_else(|| ModelSection::mock(id))
                })
                .collect();
        }
        if let Some(metrics) = &o.metrics {
            config.stats.metrics = metrics.clone();
        }
        if let Some(b) = o.permutations {
            config.stats.permutations = b;
        }
        if let Some(root) = &o.run_root {
            config.run_root = root.clone();
        }
        let eff = Self { config, base_dir };
        eff.validate()?;
        Ok(eff)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let bad = |m: String| Err(CliError::Validation(m));
        if c.models.is_empty() {
            return bad("at least one [[models]] entry (or --models) is required".into());
        }
        let mut ids: Vec<&str> = c.models.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("model ids must be unique".into());
        }
        if ids
            .iter()
            .any(|id| id.is_empty() || id.contains(['/', '\\']))
        {
            return bad("model ids must be non-empty and contain no path separators".into());
        }
        if !c.mock {
            for m in &c.models {
                m.endpoint()?;
            }
            if c.embedding.remote.is_none() {
                return bad("embedding.remote is required outside mock mode".into());
            }
        }
        if c.stats.metrics.is_empty() {
            return bad("stats.metrics must not be empty".into());
        }
        if c.stats.permutations < cfaudit_core::stats::MIN_PERMUTATIONS {
            return bad(format!(
                "stats.permutations must be at least {}",
                cfaudit_core::stats::MIN_PERMUTATIONS
            ));
        }
        if c.generation.parallelism == 0 || c.embedding.parallelism == 0 {
            return bad("parallelism must be positive".into());
        }
        if c.embedding.mock_dim == 0 {
            return bad("embedding.mock_dim must be positive".into());
        }
        if c.corpus.per_group_cap == 0 {
            return bad("corpus.per_group_cap must be positive".into());
        }
        c.corpus.selection(c.seed)?;
        if c.tsne.perplexity.is_nan()
            || c.tsne.perplexity <= 1.0
            || c.tsne.iterations == 0
            || c.tsne.trustworthiness_k == 0
        {
            return bad(
                "tsne.perplexity must exceed 1; iterations and trustworthiness_k must be positive"
                    .into(),
            );
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Hash of the effective configuration, excluding the seed and run root.
    pub fn config_hash(&self) -> String {
        let mut c = self.config.clone();
        c.seed = 0;
        c.run_root = PathBuf::new();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.config.run_root).join(format!(
            "{}-seed{}",
            self.config_hash(),
            self.config.seed
        ))
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.config.models.iter().map(|m| m.id.clone()).collect()
    }
}
