//! Declarative experiment configuration: a single JSON document describing
//! one translation direction, its pool, retrievers, template, k grid, and
//! endpoints. Validation reports every problem at once rather than stopping
//! at the first.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{CorpusFormat, JsonlFields, LangCode};
use crate::embedding::ProviderConfig;
use crate::gateway::{EndpointConfig, GenParams};
use crate::prompting::{ExampleOrder, TemplateId};
use crate::retrieval::Direction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValidationIssue {
    Schema { field: String, reason: String },
    MissingResource { path: String },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::Schema { field, reason } => write!(f, "schema error at {field:?}: {reason}"),
            ValidationIssue::MissingResource { path } => write!(f, "missing resource: {path}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ValidationIssue>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionConfig {
    pub source_lang: LangCode,
    pub target_lang: LangCode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusFileConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    #[serde(default)]
    pub fields: JsonlFields,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Jsonl
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolConfig {
    pub flores: CorpusFileConfig,
    #[serde(default)]
    pub nllb: Option<CorpusFileConfig>,
    /// Prefix of the high-quality corpus; `null` means all of it.
    #[serde(default)]
    pub n1: Option<usize>,
    #[serde(default)]
    pub n2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RetrieverConfig {
    Random {
        seeds: Vec<u64>,
    },
    Bm25 {
        #[serde(default = "default_k1")]
        k1: f64,
        #[serde(default = "default_b")]
        b: f64,
    },
    Rbm25 {
        #[serde(default = "default_candidates")]
        candidates: usize,
        #[serde(default = "default_ngram_order")]
        max_ngram_order: usize,
        #[serde(default = "default_k1")]
        k1: f64,
        #[serde(default = "default_b")]
        b: f64,
    },
    Bleu {},
    Embedding {
        model: String,
        #[serde(default)]
        pool_embeddings: Option<PathBuf>,
        #[serde(default)]
        query_embeddings: Option<PathBuf>,
        /// Fetch missing embeddings from the configured provider endpoint.
        #[serde(default)]
        provider: bool,
    },
    Borda {
        embedding_model: String,
    },
}

fn default_k1() -> f64 {
    1.5
}
fn default_b() -> f64 {
    0.75
}
fn default_candidates() -> usize {
    100
}
fn default_ngram_order() -> usize {
    4
}

impl RetrieverConfig {
    /// Stable label used in file names and report rows.
    pub fn label(&self) -> String {
        match self {
            RetrieverConfig::Random { .. } => "random".into(),
            RetrieverConfig::Bm25 { .. } => "bm25".into(),
            RetrieverConfig::Rbm25 { .. } => "rbm25".into(),
            RetrieverConfig::Bleu {} => "bleu".into(),
            RetrieverConfig::Embedding { model, .. } => model.clone(),
            RetrieverConfig::Borda { embedding_model } => format!("borda_{embedding_model}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptConfig {
    pub template: TemplateId,
    #[serde(default)]
    pub order: ExampleOrder,
    #[serde(default)]
    pub diamond: Option<String>,
    #[serde(default)]
    pub example_separator: Option<String>,
    #[serde(default)]
    pub names_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerEndpoint {
    pub url: String,
    #[serde(default = "default_scorer_timeout")]
    pub timeout_secs: u64,
}

fn default_scorer_timeout() -> u64 {
    300
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointsConfig {
    pub completion: EndpointConfig,
    #[serde(default)]
    pub embeddings: Option<ProviderConfig>,
    #[serde(default)]
    pub scorer: Option<ScorerEndpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_beam_width")]
    pub beam_width: Option<u32>,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub logprobs: bool,
}

fn default_max_tokens() -> u32 {
    100
}
fn default_beam_width() -> Option<u32> {
    Some(2)
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_tokens: default_max_tokens(),
            beam_width: default_beam_width(),
            stop: Vec::new(),
            temperature: 0.0,
            logprobs: false,
        }
    }
}

impl GenerationConfig {
    pub fn to_params(&self) -> GenParams {
        GenParams {
            max_tokens: self.max_tokens,
            beam_width: self.beam_width,
            stop: self.stop.clone(),
            temperature: self.temperature,
            logprobs: self.logprobs,
        }
    }
}

/// Where segment COMET scores come from; gating is skipped when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CometConfig {
    /// One JSONL score file per setting under `dir`, named `<setting>.jsonl`.
    Files { dir: PathBuf },
    /// Use `endpoints.scorer`.
    Endpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LangIdConfig {
    /// Train the builtin classifier on the pool's source and target sides.
    Pool,
    /// One JSONL prediction file per setting under `dir`.
    Files { dir: PathBuf },
}

impl Default for LangIdConfig {
    fn default() -> Self {
        LangIdConfig::Pool
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub comet: Option<CometConfig>,
    #[serde(default)]
    pub langid: LangIdConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(default = "default_pool_label")]
    pub label: String,
    /// Pool embedding matrix for the diversity score: an explicit JSONL path
    /// or the model name of a configured embedding retriever.
    #[serde(default)]
    pub embeddings_path: Option<PathBuf>,
    #[serde(default)]
    pub embedding_model: Option<String>,
    /// Per-pair target-side token log-probabilities (JSONL).
    pub logprobs: PathBuf,
    /// k at which per-retriever average similarity is reported.
    #[serde(default = "default_analysis_k")]
    pub k: usize,
}

fn default_pool_label() -> String {
    "pool".into()
}
fn default_analysis_k() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub direction: DirectionConfig,
    #[serde(default)]
    pub retrieval_direction: Direction,
    pub pool: PoolConfig,
    pub queries: CorpusFileConfig,
    #[serde(default)]
    pub retrievers: Vec<RetrieverConfig>,
    pub prompt: PromptConfig,
    pub k: Vec<usize>,
    pub endpoints: EndpointsConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub analysis: Option<AnalysisConfig>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Stable hash of the resolved config document.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialize");
        crate::embedding::hex_digest(json.as_bytes())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_exists(base: &Path, p: &Path, issues: &mut Vec<ValidationIssue>) {
    let full = resolve(base, p);
    if !full.exists() {
        issues.push(ValidationIssue::MissingResource { path: full.display().to_string() });
    }
}

fn schema(field: &str, reason: &str) -> ValidationIssue {
    ValidationIssue::Schema { field: field.to_string(), reason: reason.to_string() }
}

/// Structural checks on the raw JSON so that every problem is reported in one
/// pass, before typed deserialization.
fn collect_issues(root: &Value, base: &Path) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();

    let mut k_has_zero = false;
    match root.get("k") {
        None => issues.push(schema("k", "required field is missing")),
        Some(Value::Array(items)) if !items.is_empty() => {
            for item in items {
                match item.as_i64() {
                    Some(v) if v >= 0 => k_has_zero |= v == 0,
                    _ => issues.push(schema("k", "entries must be integers >= 0")),
                }
            }
        }
        Some(_) => issues.push(schema("k", "must be a non-empty array of integers >= 0")),
    }

    for field in ["direction", "pool", "queries", "prompt", "endpoints", "output_dir"] {
        if root.get(field).is_none() {
            issues.push(schema(field, "required field is missing"));
        }
    }

    if let Some(direction) = root.get("direction") {
        for side in ["source_lang", "target_lang"] {
            match direction.get(side).and_then(Value::as_str) {
                Some(code) if LangCode::new(code).is_ok() => {}
                Some(code) => issues.push(schema(
                    &format!("direction.{side}"),
                    &format!("{code:?} is not a 3-letter lowercase code"),
                )),
                None => issues.push(schema(&format!("direction.{side}"), "required string")),
            }
        }
    }

    if let Some(pool) = root.get("pool") {
        match pool.get("flores").and_then(|f| f.get("path")).and_then(Value::as_str) {
            Some(p) => check_exists(base, Path::new(p), &mut issues),
            None => issues.push(schema("pool.flores.path", "required string")),
        }
        let n2 = pool.get("n2").and_then(Value::as_u64).unwrap_or(0);
        match pool.get("nllb") {
            Some(nllb) => match nllb.get("path").and_then(Value::as_str) {
                Some(p) => check_exists(base, Path::new(p), &mut issues),
                None => issues.push(schema("pool.nllb.path", "required string")),
            },
            None if n2 > 0 => issues.push(schema("pool.nllb", "required when n2 > 0")),
            None => {}
        }
    }

    if let Some(queries) = root.get("queries") {
        match queries.get("path").and_then(Value::as_str) {
            Some(p) => check_exists(base, Path::new(p), &mut issues),
            None => issues.push(schema("queries.path", "required string")),
        }
    }

    if let Some(prompt) = root.get("prompt") {
        match prompt.get("template").and_then(Value::as_str) {
            Some(t) if t.parse::<TemplateId>().is_ok() => {}
            Some(t) => issues.push(schema("prompt.template", &format!("unknown template {t:?}"))),
            None => issues.push(schema("prompt.template", "required string T1..T6")),
        }
        if let Some(table) = prompt.get("names_table").and_then(Value::as_str) {
            check_exists(base, Path::new(table), &mut issues);
        }
    }

    let retrievers = root.get("retrievers").and_then(Value::as_array);
    let mut embedding_models = Vec::new();
    if let Some(entries) = retrievers {
        for (idx, entry) in entries.iter().enumerate() {
            let field = format!("retrievers[{idx}]");
            let Some(kind) = entry.get("type").and_then(Value::as_str) else {
                issues.push(schema(&field, "missing \"type\""));
                continue;
            };
            match kind {
                "random" => match entry.get("seeds").and_then(Value::as_array) {
                    Some(seeds) if !seeds.is_empty() => {
                        if seeds.iter().any(|s| s.as_u64().is_none()) {
                            issues.push(schema(
                                &format!("{field}.seeds"),
                                "seeds must be non-negative integers",
                            ));
                        }
                    }
                    _ => issues.push(schema(
                        &format!("{field}.seeds"),
                        "the random baseline requires at least one seed",
                    )),
                },
                "embedding" => {
                    match entry.get("model").and_then(Value::as_str) {
                        Some(model) if !model.is_empty() => {
                            embedding_models.push(model.to_string())
                        }
                        _ => issues.push(schema(&format!("{field}.model"), "required string")),
                    }
                    let provider = entry.get("provider").and_then(Value::as_bool).unwrap_or(false);
                    let pool_path = entry.get("pool_embeddings").and_then(Value::as_str);
                    let query_path = entry.get("query_embeddings").and_then(Value::as_str);
                    if provider {
                        if root
                            .get("endpoints")
                            .and_then(|e| e.get("embeddings"))
                            .is_none()
                        {
                            issues.push(schema(
                                &format!("{field}.provider"),
                                "requires endpoints.embeddings",
                            ));
                        }
                    } else {
                        match (pool_path, query_path) {
                            (Some(p), Some(q)) => {
                                check_exists(base, Path::new(p), &mut issues);
                                check_exists(base, Path::new(q), &mut issues);
                            }
                            _ => issues.push(schema(
                                &field,
                                "needs pool_embeddings and query_embeddings, or provider: true",
                            )),
                        }
                    }
                }
                "borda" => {
                    if entry.get("embedding_model").and_then(Value::as_str).is_none() {
                        issues.push(schema(
                            &format!("{field}.embedding_model"),
                            "required string naming an embedding retriever",
                        ));
                    }
                }
                "bm25" | "rbm25" | "bleu" => {}
                other => issues.push(schema(&field, &format!("unknown retriever type {other:?}"))),
            }
        }
        for (idx, entry) in entries.iter().enumerate() {
            if entry.get("type").and_then(Value::as_str) == Some("borda") {
                if let Some(model) = entry.get("embedding_model").and_then(Value::as_str) {
                    if !embedding_models.iter().any(|m| m == model) {
                        issues.push(schema(
                            &format!("retrievers[{idx}].embedding_model"),
                            &format!("no embedding retriever with model {model:?}"),
                        ));
                    }
                }
            }
        }
    }
    let retriever_count = retrievers.map(|r| r.len()).unwrap_or(0);
    if retriever_count == 0 && !k_has_zero {
        issues.push(schema("retrievers", "empty retriever list requires k to include 0"));
    }

    if let Some(endpoints) = root.get("endpoints") {
        match endpoints.get("completion") {
            Some(c) => {
                for key in ["url", "model"] {
                    if c.get(key).and_then(Value::as_str).map(str::is_empty).unwrap_or(true) {
                        issues.push(schema(
                            &format!("endpoints.completion.{key}"),
                            "required non-empty string",
                        ));
                    }
                }
            }
            None => issues.push(schema("endpoints.completion", "required field is missing")),
        }
    }

    if let Some(evaluation) = root.get("evaluation") {
        if let Some(comet) = evaluation.get("comet").filter(|c| !c.is_null()) {
            match comet.get("mode").and_then(Value::as_str) {
                Some("files") => match comet.get("dir").and_then(Value::as_str) {
                    Some(dir) => check_exists(base, Path::new(dir), &mut issues),
                    None => issues.push(schema("evaluation.comet.dir", "required for files mode")),
                },
                Some("endpoint") => {
                    if root.get("endpoints").and_then(|e| e.get("scorer")).is_none() {
                        issues.push(schema("evaluation.comet", "endpoint mode requires endpoints.scorer"));
                    }
                }
                _ => issues.push(schema("evaluation.comet.mode", "must be \"files\" or \"endpoint\"")),
            }
        }
        if let Some(langid) = evaluation.get("langid") {
            match langid.get("mode").and_then(Value::as_str) {
                Some("files") => match langid.get("dir").and_then(Value::as_str) {
                    Some(dir) => check_exists(base, Path::new(dir), &mut issues),
                    None => issues.push(schema("evaluation.langid.dir", "required for files mode")),
                },
                Some("pool") | None => {}
                _ => issues.push(schema("evaluation.langid.mode", "must be \"pool\" or \"files\"")),
            }
        }
    }

    if let Some(analysis) = root.get("analysis").filter(|a| !a.is_null()) {
        match analysis.get("logprobs").and_then(Value::as_str) {
            Some(p) => check_exists(base, Path::new(p), &mut issues),
            None => issues.push(schema("analysis.logprobs", "required string")),
        }
        let has_path = analysis.get("embeddings_path").and_then(Value::as_str).is_some();
        let has_model = analysis.get("embedding_model").and_then(Value::as_str).is_some();
        if !has_path && !has_model {
            issues.push(schema("analysis", "needs embeddings_path or embedding_model"));
        }
        if let Some(p) = analysis.get("embeddings_path").and_then(Value::as_str) {
            check_exists(base, Path::new(p), &mut issues);
        }
        if let Some(model) = analysis.get("embedding_model").and_then(Value::as_str) {
            if !embedding_models.iter().any(|m| m == model) {
                issues.push(schema(
                    "analysis.embedding_model",
                    &format!("no embedding retriever with model {model:?}"),
                ));
            }
        }
    }

    issues
}

/// Parse and validate a config file. Relative paths inside the config are
/// resolved against the config file's directory.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let raw = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let root: Value = serde_json::from_str(&raw).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let issues = collect_issues(&root, &base);
    if !issues.is_empty() {
        return Err(ConfigError::Invalid(issues));
    }
    let mut config: ExperimentConfig = serde_json::from_value(root).map_err(|e| {
        ConfigError::Invalid(vec![schema("<config>", &e.to_string())])
    })?;
    config.k.sort_unstable();
    config.k.dedup();

    // resolve every relative path against the config directory
    config.pool.flores.path = resolve(&base, &config.pool.flores.path);
    if let Some(nllb) = &mut config.pool.nllb {
        nllb.path = resolve(&base, &nllb.path);
    }
    config.queries.path = resolve(&base, &config.queries.path);
    for retriever in &mut config.retrievers {
        if let RetrieverConfig::Embedding { pool_embeddings, query_embeddings, .. } = retriever {
            if let Some(p) = pool_embeddings {
                *p = resolve(&base, p);
            }
            if let Some(p) = query_embeddings {
                *p = resolve(&base, p);
            }
        }
    }
    if let Some(table) = &mut config.prompt.names_table {
        *table = resolve(&base, table);
    }
    if let Some(CometConfig::Files { dir }) = &mut config.evaluation.comet {
        *dir = resolve(&base, dir);
    }
    if let LangIdConfig::Files { dir } = &mut config.evaluation.langid {
        *dir = resolve(&base, dir);
    }
    if let Some(analysis) = &mut config.analysis {
        analysis.logprobs = resolve(&base, &analysis.logprobs);
        if let Some(p) = &mut analysis.embeddings_path {
            *p = resolve(&base, p);
        }
    }
    config.output_dir = resolve(&base, &config.output_dir);
    if let Some(cache) = &mut config.cache_dir {
        *cache = resolve(&base, cache);
    }
    Ok(config)
}
