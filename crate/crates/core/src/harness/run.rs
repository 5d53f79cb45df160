//! End-to-end experiment execution: ingest, embed, retrieve, prompt,
//! generate, evaluate, analyze.
//!
//! Stages are deterministic functions of the config plus the content caches
//! (generations, provider embeddings), so re-running an unchanged config
//! rewrites byte-identical artifacts without network traffic. Generation
//! failures are recorded per item and the run continues with partial
//! coverage.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analysis::{pool_quality_report, reports_to_csv, FileLogprobs};
use crate::corpus::{compose_pool, load_corpus, Origin, ParallelPair, Pool};
use crate::embedding::{
    load_embeddings, save_embeddings, write_atomic, EmbeddingMatrix, EmbeddingProvider,
};
use crate::evaluation::{
    corpus_bleu, corpus_lacomet, error_categories, gate_segments, sentence_bleu, train_langid,
    BleuTokenizer, CometSource, ErrorCounts, LangIdSource, SegmentEval,
};
use crate::gateway::{Gateway, PostprocessMode};
use crate::prompting::{build_prompt, ExampleTexts, LanguageNameTable, PromptSpec};
use crate::retrieval::{
    borda_merge, build_bm25_index, retrieve_bleu, retrieve_bm25, retrieve_embedding,
    retrieve_random, retrieve_rbm25, Bm25Index, Bm25Params, RankedExample, RetrievalConfig,
    SelectionRecord,
};

use super::config::{
    AnalysisConfig, CometConfig, ExperimentConfig, LangIdConfig, RetrieverConfig,
};
use super::HarnessError;

/// Separator choices recorded for auditability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DelimiterChoice {
    pub diamond: String,
    pub example_separator: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageInfo {
    pub artifacts: Vec<String>,
    pub completed_at: u64,
}

/// What a run produced and where.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub output_dir: PathBuf,
    pub delimiter: DelimiterChoice,
    pub stages: BTreeMap<String, StageInfo>,
    /// Per-item generation failures (`setting/query_id: error`).
    pub errors: Vec<String>,
    /// Network requests issued during this run (gateway + provider).
    pub network_requests: usize,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let raw = fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&raw).map_err(|e| HarnessError::Other(e.to_string()))
    }

    pub fn manifest_path(output_dir: &Path) -> PathBuf {
        output_dir.join("manifest.json")
    }
}

/// Which pipeline stages to execute (always in pipeline order, each stage
/// implies the ones before it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Embed,
    Retrieve,
    Prompt,
    Generate,
    Evaluate,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Retrieve,
        Stage::Prompt,
        Stage::Generate,
        Stage::Evaluate,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Prompt => "prompt",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Analyze => "analyze",
        }
    }
}

/// One (retriever, k, seed) cell of the experiment grid. `retriever: None`
/// is the retriever-independent zero-shot setting.
#[derive(Debug, Clone)]
pub struct Setting {
    pub label: String,
    pub retriever: Option<RetrieverConfig>,
    pub retriever_label: String,
    pub k: usize,
    pub seed: Option<u64>,
}

fn build_settings(config: &ExperimentConfig) -> Vec<Setting> {
    let mut settings = Vec::new();
    for &k in &config.k {
        if k == 0 {
            settings.push(Setting {
                label: "zeroshot_k0".into(),
                retriever: None,
                retriever_label: "zeroshot".into(),
                k: 0,
                seed: None,
            });
            continue;
        }
        for retriever in &config.retrievers {
            let base = retriever.label();
            match retriever {
                RetrieverConfig::Random { seeds } => {
                    for &seed in seeds {
                        settings.push(Setting {
                            label: format!("{base}_seed{seed}_k{k}"),
                            retriever: Some(retriever.clone()),
                            retriever_label: base.clone(),
                            k,
                            seed: Some(seed),
                        });
                    }
                }
                _ => settings.push(Setting {
                    label: format!("{base}_k{k}"),
                    retriever: Some(retriever.clone()),
                    retriever_label: base.clone(),
                    k,
                    seed: None,
                }),
            }
        }
    }
    settings
}

fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct LoadedResources {
    pool: Pool,
    queries: Vec<ParallelPair>,
    prompt_spec: PromptSpec,
    /// Pool-side and query embedding matrices per embedding model.
    pool_matrices: HashMap<String, EmbeddingMatrix>,
    query_matrices: HashMap<String, EmbeddingMatrix>,
    bm25_index: Option<Bm25Index>,
    rbm25_index: Option<Bm25Index>,
}

pub struct Runner {
    config: ExperimentConfig,
    out: PathBuf,
    cache_dir: PathBuf,
    manifest: RunManifest,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Self {
        let out = config.output_dir.clone();
        let cache_dir = config.cache_dir.clone().unwrap_or_else(|| out.join("cache"));
        let diamond = config.prompt.diamond.clone().unwrap_or_else(|| "\n".into());
        let example_separator =
            config.prompt.example_separator.clone().unwrap_or_else(|| "\n\n".into());
        let manifest = RunManifest {
            config_hash: config.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            output_dir: out.clone(),
            delimiter: DelimiterChoice { diamond, example_separator },
            stages: BTreeMap::new(),
            errors: Vec::new(),
            network_requests: 0,
        };
        Runner { config, out, cache_dir, manifest }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn record_stage(&mut self, stage: Stage, artifacts: Vec<PathBuf>) {
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageInfo {
                artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
                completed_at: now(),
            },
        );
    }

    fn write_artifact(&self, path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
        write_atomic(path, bytes).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    fn load_corpora(&self) -> Result<(Pool, Vec<ParallelPair>), HarnessError> {
        let cfg = &self.config;
        let flores = load_corpus(
            &cfg.pool.flores.path,
            cfg.pool.flores.format,
            Origin::FloresDev,
            &cfg.direction.source_lang,
            &cfg.direction.target_lang,
            &cfg.pool.flores.fields,
        )?;
        let nllb = match &cfg.pool.nllb {
            Some(nllb) => load_corpus(
                &nllb.path,
                nllb.format,
                Origin::Nllb,
                &cfg.direction.source_lang,
                &cfg.direction.target_lang,
                &nllb.fields,
            )?,
            None => Vec::new(),
        };
        let n1 = cfg.pool.n1.unwrap_or(flores.len());
        let pool = compose_pool(&flores, &nllb, n1, cfg.pool.n2)?;
        let queries = load_corpus(
            &cfg.queries.path,
            cfg.queries.format,
            Origin::FloresDevtest,
            &cfg.direction.source_lang,
            &cfg.direction.target_lang,
            &cfg.queries.fields,
        )?;
        Ok((pool, queries))
    }

    fn prompt_spec(&self) -> Result<PromptSpec, HarnessError> {
        let cfg = &self.config;
        let owned_table;
        let table = match &cfg.prompt.names_table {
            Some(path) => {
                owned_table = LanguageNameTable::from_path(path)?;
                &owned_table
            }
            None => LanguageNameTable::builtin(),
        };
        let mut spec = PromptSpec::new(
            cfg.prompt.template,
            cfg.prompt.order,
            &cfg.direction.source_lang,
            &cfg.direction.target_lang,
            table,
        )?;
        spec.diamond = self.manifest.delimiter.diamond.clone();
        spec.example_separator = self.manifest.delimiter.example_separator.clone();
        Ok(spec)
    }

    fn needs_bm25(&self) -> bool {
        self.config
            .retrievers
            .iter()
            .any(|r| matches!(r, RetrieverConfig::Bm25 { .. } | RetrieverConfig::Borda { .. }))
    }

    fn bm25_params(&self) -> Bm25Params {
        self.config
            .retrievers
            .iter()
            .find_map(|r| match r {
                RetrieverConfig::Bm25 { k1, b } => Some(Bm25Params { k1: *k1, b: *b }),
                _ => None,
            })
            .unwrap_or_default()
    }

    fn embedding_entries(&self) -> Vec<(&String, &Option<PathBuf>, &Option<PathBuf>, bool)> {
        self.config
            .retrievers
            .iter()
            .filter_map(|r| match r {
                RetrieverConfig::Embedding { model, pool_embeddings, query_embeddings, provider } => {
                    Some((model, pool_embeddings, query_embeddings, *provider))
                }
                _ => None,
            })
            .collect()
    }

    /// Run stages in pipeline order up to and including `until`, then write
    /// the manifest.
    pub fn run_until(&mut self, until: Stage) -> Result<RunManifest, HarnessError> {
        fs::create_dir_all(&self.out).map_err(|e| HarnessError::Io {
            path: self.out.display().to_string(),
            source: e,
        })?;

        // ingest
        let (pool, queries) = self.load_corpora()?;
        let pool_path = self.out.join("pool.jsonl");
        let mut pool_lines = String::new();
        for pair in pool.pairs() {
            pool_lines.push_str(&serde_json::to_string(pair).expect("pair serialize"));
            pool_lines.push('\n');
        }
        self.write_artifact(&pool_path, pool_lines.as_bytes())?;
        self.record_stage(Stage::Ingest, vec![pool_path]);
        if until == Stage::Ingest {
            return self.finish();
        }

        // embed
        let mut pool_matrices = HashMap::new();
        let mut query_matrices = HashMap::new();
        let mut provider_requests = 0usize;
        let mut embed_artifacts = Vec::new();
        let side = self.config.retrieval_direction.side();
        for (model, pool_path_cfg, query_path_cfg, use_provider) in self.embedding_entries() {
            let (pool_matrix, query_matrix) = if use_provider {
                let provider_cfg = self
                    .config
                    .endpoints
                    .embeddings
                    .clone()
                    .ok_or_else(|| HarnessError::Other("provider retriever without endpoints.embeddings".into()))?;
                let provider = EmbeddingProvider::new(provider_cfg, Some(self.cache_dir.clone()));
                let pool_texts: Vec<String> = pool
                    .pairs()
                    .iter()
                    .map(|p| match side {
                        crate::retrieval::Side::Source => p.source_text.clone(),
                        crate::retrieval::Side::Target => p.target_text.clone(),
                    })
                    .collect();
                let pool_ids: Vec<String> = pool.pairs().iter().map(|p| p.id.clone()).collect();
                let pool_matrix = provider.fetch_embeddings(&pool_texts)?.relabel(pool_ids)?;
                let query_texts: Vec<String> =
                    queries.iter().map(|q| q.source_text.clone()).collect();
                let query_ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
                let query_matrix = provider.fetch_embeddings(&query_texts)?.relabel(query_ids)?;
                provider_requests += provider.requests_made();
                (pool_matrix, query_matrix)
            } else {
                let pool_matrix = load_embeddings(
                    pool_path_cfg.as_ref().expect("validated: path present"),
                )?;
                let query_matrix = load_embeddings(
                    query_path_cfg.as_ref().expect("validated: path present"),
                )?;
                (pool_matrix, query_matrix)
            };
            let slug = sanitize_id(model);
            let pool_snapshot = self.out.join("embeddings").join(format!("{slug}_pool.jsonl"));
            let query_snapshot =
                self.out.join("embeddings").join(format!("{slug}_queries.jsonl"));
            save_embeddings(&pool_snapshot, &pool_matrix)?;
            save_embeddings(&query_snapshot, &query_matrix)?;
            embed_artifacts.push(pool_snapshot);
            embed_artifacts.push(query_snapshot);
            pool_matrices.insert(model.clone(), pool_matrix);
            query_matrices.insert(model.clone(), query_matrix);
        }
        self.manifest.network_requests += provider_requests;
        self.record_stage(Stage::Embed, embed_artifacts);
        if until == Stage::Embed {
            return self.finish();
        }

        let bm25_index = if self.needs_bm25() {
            Some(build_bm25_index(&pool, side, self.bm25_params()))
        } else {
            None
        };
        let rbm25_index = self.config.retrievers.iter().find_map(|r| match r {
            RetrieverConfig::Rbm25 { k1, b, .. } => {
                Some(build_bm25_index(&pool, side, Bm25Params { k1: *k1, b: *b }))
            }
            _ => None,
        });
        let resources = LoadedResources {
            pool,
            queries,
            prompt_spec: self.prompt_spec()?,
            pool_matrices,
            query_matrices,
            bm25_index,
            rbm25_index,
        };
        self.run_from_retrieve(until, resources)
    }

    fn retrieve_for_setting(
        &self,
        setting: &Setting,
        resources: &LoadedResources,
        query: &ParallelPair,
    ) -> Result<Vec<RankedExample>, HarnessError> {
        let retriever = setting.retriever.as_ref().expect("k > 0 settings have a retriever");
        let cfg = RetrievalConfig {
            k: setting.k,
            direction: self.config.retrieval_direction,
            seed: setting.seed.unwrap_or(0),
        };
        let ranked = match retriever {
            RetrieverConfig::Random { .. } => retrieve_random(&resources.pool, &cfg)?,
            RetrieverConfig::Bm25 { .. } => retrieve_bm25(
                &query.source_text,
                resources.bm25_index.as_ref().expect("index built"),
                &cfg,
            )?,
            RetrieverConfig::Rbm25 { candidates, max_ngram_order, .. } => retrieve_rbm25(
                &query.source_text,
                resources.rbm25_index.as_ref().expect("index built"),
                &cfg,
                *candidates,
                *max_ngram_order,
            )?,
            RetrieverConfig::Bleu {} => retrieve_bleu(&query.source_text, &resources.pool, &cfg)?,
            RetrieverConfig::Embedding { model, .. } => {
                let query_matrix = &resources.query_matrices[model];
                let query_vec = query_matrix
                    .row_for(&query.id)
                    .ok_or_else(|| HarnessError::Other(format!(
                        "no query embedding for {} under model {model}",
                        query.id
                    )))?;
                retrieve_embedding(
                    query_vec,
                    &resources.pool,
                    &resources.pool_matrices[model],
                    model,
                    &cfg,
                )?
            }
            RetrieverConfig::Borda { embedding_model } => {
                let query_matrix = &resources.query_matrices[embedding_model];
                let query_vec = query_matrix
                    .row_for(&query.id)
                    .ok_or_else(|| HarnessError::Other(format!(
                        "no query embedding for {} under model {embedding_model}",
                        query.id
                    )))?;
                let emb_list = retrieve_embedding(
                    query_vec,
                    &resources.pool,
                    &resources.pool_matrices[embedding_model],
                    embedding_model,
                    &cfg,
                )?;
                let bm25_list = retrieve_bm25(
                    &query.source_text,
                    resources.bm25_index.as_ref().expect("index built"),
                    &cfg,
                )?;
                borda_merge(&emb_list, &bm25_list, setting.k)?
            }
        };
        Ok(ranked)
    }

    fn run_from_retrieve(
        &mut self,
        until: Stage,
        resources: LoadedResources,
    ) -> Result<RunManifest, HarnessError> {
        let settings = build_settings(&self.config);

        // retrieve
        let mut selections: BTreeMap<String, Vec<(String, Vec<RankedExample>)>> = BTreeMap::new();
        let mut retrieve_artifacts = Vec::new();
        for setting in settings.iter().filter(|s| s.k > 0) {
            let mut per_query = Vec::with_capacity(resources.queries.len());
            let mut lines = String::new();
            for query in &resources.queries {
                let ranked = self.retrieve_for_setting(setting, &resources, query)?;
                let record = SelectionRecord::from_ranked(&query.id, &ranked);
                lines.push_str(&serde_json::to_string(&record).expect("selection serialize"));
                lines.push('\n');
                per_query.push((query.id.clone(), ranked));
            }
            let path = self.out.join("selections").join(format!("{}.jsonl", setting.label));
            self.write_artifact(&path, lines.as_bytes())?;
            retrieve_artifacts.push(path);
            selections.insert(setting.label.clone(), per_query);
        }
        self.record_stage(Stage::Retrieve, retrieve_artifacts);
        if until == Stage::Retrieve {
            return self.finish();
        }

        // prompt
        let mut prompts: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        let mut prompt_artifacts = Vec::new();
        for setting in &settings {
            let mut per_query = Vec::with_capacity(resources.queries.len());
            let dir = self.out.join("prompts").join(&setting.label);
            fs::create_dir_all(&dir).map_err(|e| HarnessError::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
            for query in &resources.queries {
                let examples: Vec<ExampleTexts> = if setting.k == 0 {
                    Vec::new()
                } else {
                    selections[&setting.label]
                        .iter()
                        .find(|(qid, _)| qid == &query.id)
                        .expect("selection computed for query")
                        .1
                        .iter()
                        .map(|r| {
                            let pair = resources
                                .pool
                                .get(&r.pair_id)
                                .expect("selected id exists in pool");
                            ExampleTexts {
                                source_text: pair.source_text.clone(),
                                target_text: pair.target_text.clone(),
                            }
                        })
                        .collect()
                };
                let prompt = build_prompt(&examples, &query.source_text, &resources.prompt_spec);
                let path = dir.join(format!("{}.txt", sanitize_id(&query.id)));
                self.write_artifact(&path, prompt.as_bytes())?;
                per_query.push((query.id.clone(), prompt));
            }
            prompt_artifacts.push(dir);
            prompts.insert(setting.label.clone(), per_query);
        }
        self.record_stage(Stage::Prompt, prompt_artifacts);
        if until == Stage::Prompt {
            return self.finish();
        }

        // generate
        let gateway = Gateway::new(
            self.config.endpoints.completion.clone(),
            Some(&self.cache_dir.join("generations.jsonl")),
        )?;
        let params = self.config.generation.to_params();
        let mut hypotheses: BTreeMap<String, Vec<HypothesisRecord>> = BTreeMap::new();
        let mut generate_artifacts = Vec::new();
        for setting in &settings {
            let mode = if setting.k == 0 {
                PostprocessMode::ZeroShot
            } else {
                PostprocessMode::FewShot {
                    header: resources.prompt_spec.source_header.clone(),
                }
            };
            let batch = &prompts[&setting.label];
            let results = gateway.generate_batch(batch, &params, |_| mode.clone());
            let mut records = Vec::new();
            let mut lines = String::new();
            for (query_id, outcome) in results {
                match outcome {
                    Ok(record) => {
                        let hyp = HypothesisRecord {
                            query_id,
                            raw: record.raw_output.clone(),
                            hypothesis: record
                                .postprocessed_output
                                .clone()
                                .unwrap_or_else(|| record.raw_output.clone()),
                        };
                        lines.push_str(&serde_json::to_string(&hyp).expect("hyp serialize"));
                        lines.push('\n');
                        records.push(hyp);
                    }
                    Err(err) => {
                        self.manifest
                            .errors
                            .push(format!("{}/{}: {err}", setting.label, query_id));
                    }
                }
            }
            let path = self.out.join("hypotheses").join(format!("{}.jsonl", setting.label));
            self.write_artifact(&path, lines.as_bytes())?;
            generate_artifacts.push(path);
            hypotheses.insert(setting.label.clone(), records);
        }
        self.manifest.network_requests += gateway.requests_made();
        self.record_stage(Stage::Generate, generate_artifacts);
        if until == Stage::Generate {
            return self.finish();
        }

        // evaluate
        let langid = self.build_langid(&resources)?;
        let eval_artifacts = self.evaluate(&settings, &resources, &hypotheses, &langid)?;
        self.record_stage(Stage::Evaluate, eval_artifacts);
        if until == Stage::Evaluate {
            return self.finish();
        }

        // analyze
        if let Some(analysis) = self.config.analysis.clone() {
            let artifacts = self.analyze(&analysis, &resources, &selections)?;
            self.record_stage(Stage::Analyze, artifacts);
        }
        self.finish()
    }

    fn build_langid(&self, resources: &LoadedResources) -> Result<LangIdSource, HarnessError> {
        match &self.config.evaluation.langid {
            LangIdConfig::Files { dir: _ } => {
                // per-setting files are loaded lazily in evaluate()
                Ok(LangIdSource::File(HashMap::new()))
            }
            LangIdConfig::Pool => {
                let mut labeled = Vec::new();
                for pair in resources.pool.pairs() {
                    labeled.push((pair.source_text.clone(), pair.source_lang.clone()));
                    labeled.push((pair.target_text.clone(), pair.target_lang.clone()));
                }
                let model = train_langid(&labeled, (1, 3))?;
                Ok(LangIdSource::Model(model))
            }
        }
    }

    fn langid_for_setting(
        &self,
        default: &LangIdSource,
        setting_label: &str,
    ) -> Result<Option<LangIdSource>, HarnessError> {
        match &self.config.evaluation.langid {
            LangIdConfig::Pool => Ok(None),
            LangIdConfig::Files { dir } => {
                let path = dir.join(format!("{setting_label}.jsonl"));
                let _ = default;
                Ok(Some(LangIdSource::from_predictions_file(&path)?))
            }
        }
    }

    fn evaluate(
        &mut self,
        settings: &[Setting],
        resources: &LoadedResources,
        hypotheses: &BTreeMap<String, Vec<HypothesisRecord>>,
        langid_default: &LangIdSource,
    ) -> Result<Vec<PathBuf>, HarnessError> {
        let metrics_dir = self.out.join("metrics");
        let mut artifacts = Vec::new();
        let mut summary_rows: Vec<SummaryRecord> = Vec::new();

        for setting in settings {
            let records = &hypotheses[&setting.label];
            let references: HashMap<&str, &ParallelPair> = resources
                .queries
                .iter()
                .map(|q| (q.id.as_str(), q))
                .collect();

            let per_setting_langid = self.langid_for_setting(langid_default, &setting.label)?;
            let langid = per_setting_langid.as_ref().unwrap_or(langid_default);

            let entries: Vec<(String, String)> = records
                .iter()
                .map(|r| (r.query_id.clone(), r.hypothesis.clone()))
                .collect();
            let categories = error_categories(
                &entries,
                &self.config.direction.target_lang,
                langid,
            )?;

            let hyps: Vec<&str> = records.iter().map(|r| r.hypothesis.as_str()).collect();
            let refs: Vec<&str> = records
                .iter()
                .map(|r| references[r.query_id.as_str()].target_text.as_str())
                .collect();
            let bleu = if hyps.is_empty() {
                None
            } else {
                Some(corpus_bleu(&hyps, &refs)?)
            };

            // gated scoring only when a scorer is configured
            let mut segments: Vec<SegmentEval> = records
                .iter()
                .map(|r| {
                    let q = references[r.query_id.as_str()];
                    SegmentEval::new(
                        &r.query_id,
                        &q.source_text,
                        &r.hypothesis,
                        &q.target_text,
                        self.config.direction.target_lang.clone(),
                    )
                })
                .collect();
            let (comet_mean, lacomet) = match self.comet_source(&setting.label)? {
                Some(source) if !segments.is_empty() => {
                    source.assign(&mut segments)?;
                    gate_segments(&mut segments, langid)?;
                    let mean = segments
                        .iter()
                        .map(|s| s.comet_score.expect("assigned"))
                        .sum::<f64>()
                        / segments.len() as f64
                        * 100.0;
                    (Some(mean), Some(corpus_lacomet(&segments)?))
                }
                _ => (None, None),
            };

            let seg_path = metrics_dir.join(format!("segments_{}.csv", setting.label));
            let mut seg_csv = String::from("query_id,sentence_bleu,comet,lacomet,category\n");
            for (record, segment) in records.iter().zip(&segments) {
                let q = references[record.query_id.as_str()];
                let sbleu = sentence_bleu(
                    &record.hypothesis,
                    &q.target_text,
                    BleuTokenizer::Builtin,
                );
                let category = if record.hypothesis.trim().is_empty() {
                    "empty"
                } else if segment
                    .lang_pred
                    .as_ref()
                    .map(|p| *p != self.config.direction.target_lang)
                    .unwrap_or_else(|| {
                        langid
                            .predict(&record.query_id, &record.hypothesis)
                            .map(|p| p != self.config.direction.target_lang)
                            .unwrap_or(false)
                    })
                {
                    "wrong_language"
                } else {
                    "ok"
                };
                seg_csv.push_str(&format!(
                    "{},{:.4},{},{},{}\n",
                    record.query_id,
                    sbleu,
                    segment
                        .comet_score
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_default(),
                    segment
                        .gated_score
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_default(),
                    category,
                ));
            }
            self.write_artifact(&seg_path, seg_csv.as_bytes())?;
            artifacts.push(seg_path);

            summary_rows.push(SummaryRecord {
                retriever: setting.retriever_label.clone(),
                seed: setting.seed,
                k: setting.k,
                n: records.len(),
                bleu,
                comet: comet_mean,
                lacomet,
                counts: categories,
            });
        }

        let summary_path = metrics_dir.join("summary.csv");
        let summary_csv = render_summary(&summary_rows);
        self.write_artifact(&summary_path, summary_csv.as_bytes())?;
        artifacts.push(summary_path);

        let seeds_path = metrics_dir.join("summary_seeds.csv");
        let seeds_csv = render_seed_rows(&summary_rows);
        self.write_artifact(&seeds_path, seeds_csv.as_bytes())?;
        artifacts.push(seeds_path);
        Ok(artifacts)
    }

    fn comet_source(&self, setting_label: &str) -> Result<Option<CometSource>, HarnessError> {
        match &self.config.evaluation.comet {
            None => Ok(None),
            Some(CometConfig::Files { dir }) => {
                let path = dir.join(format!("{setting_label}.jsonl"));
                Ok(Some(CometSource::from_scores_file(&path)?))
            }
            Some(CometConfig::Endpoint) => {
                let scorer = self
                    .config
                    .endpoints
                    .scorer
                    .as_ref()
                    .expect("validated: scorer endpoint present");
                Ok(Some(CometSource::Endpoint {
                    url: scorer.url.clone(),
                    timeout_secs: scorer.timeout_secs,
                }))
            }
        }
    }

    fn analyze(
        &mut self,
        analysis: &AnalysisConfig,
        resources: &LoadedResources,
        selections: &BTreeMap<String, Vec<(String, Vec<RankedExample>)>>,
    ) -> Result<Vec<PathBuf>, HarnessError> {
        let embeddings = match (&analysis.embeddings_path, &analysis.embedding_model) {
            (Some(path), _) => load_embeddings(path)?,
            (None, Some(model)) => resources
                .pool_matrices
                .get(model)
                .cloned()
                .ok_or_else(|| HarnessError::Other(format!("no pool matrix for model {model}")))?,
            (None, None) => unreachable!("validated"),
        };
        let logprobs = FileLogprobs::load(&analysis.logprobs)?;
        let mut by_retriever: BTreeMap<String, Vec<Vec<RankedExample>>> = BTreeMap::new();
        for setting in build_settings(&self.config) {
            if setting.k != analysis.k || setting.retriever.is_none() {
                continue;
            }
            let per_query = selections
                .get(&setting.label)
                .map(|sel| sel.iter().map(|(_, ranked)| ranked.clone()).collect::<Vec<_>>())
                .unwrap_or_default();
            if per_query.is_empty() {
                continue;
            }
            by_retriever
                .entry(setting.retriever_label.clone())
                .or_default()
                .extend(per_query);
        }
        let report = pool_quality_report(
            &analysis.label,
            &resources.pool,
            &embeddings,
            &logprobs,
            &by_retriever,
        )?;
        let path = self.out.join("analysis").join("pool_report.csv");
        self.write_artifact(&path, reports_to_csv(&[report]).as_bytes())?;
        Ok(vec![path])
    }

    fn finish(&mut self) -> Result<RunManifest, HarnessError> {
        let path = RunManifest::manifest_path(&self.out);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialize");
        self.write_artifact(&path, json.as_bytes())?;
        Ok(self.manifest.clone())
    }
}

/// One hypothesis line in `hypotheses/<setting>.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub query_id: String,
    pub raw: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone)]
struct SummaryRecord {
    retriever: String,
    seed: Option<u64>,
    k: usize,
    n: usize,
    bleu: Option<f64>,
    comet: Option<f64>,
    lacomet: Option<f64>,
    counts: ErrorCounts,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

const SUMMARY_HEADER: &str = "retriever,k,n,bleu,comet,lacomet,empty,wrong_language,ok\n";

/// The main summary: one row per (retriever, k), random-baseline rows
/// averaged over seeds.
fn render_summary(rows: &[SummaryRecord]) -> String {
    #[derive(Default)]
    struct Acc {
        n: usize,
        runs: usize,
        bleu: Vec<f64>,
        comet: Vec<f64>,
        lacomet: Vec<f64>,
        empty: usize,
        wrong: usize,
        ok: usize,
    }
    let mut grouped: BTreeMap<(String, usize), Acc> = BTreeMap::new();
    for row in rows {
        let acc = grouped.entry((row.retriever.clone(), row.k)).or_default();
        acc.runs += 1;
        acc.n += row.n;
        acc.empty += row.counts.empty;
        acc.wrong += row.counts.wrong_language;
        acc.ok += row.counts.ok;
        if let Some(v) = row.bleu {
            acc.bleu.push(v);
        }
        if let Some(v) = row.comet {
            acc.comet.push(v);
        }
        if let Some(v) = row.lacomet {
            acc.lacomet.push(v);
        }
    }
    let mean = |xs: &[f64]| -> Option<f64> {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    let mut out = String::from(SUMMARY_HEADER);
    for ((retriever, k), acc) in grouped {
        let runs = acc.runs.max(1);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            retriever,
            k,
            acc.n / runs,
            fmt_opt(mean(&acc.bleu)),
            fmt_opt(mean(&acc.comet)),
            fmt_opt(mean(&acc.lacomet)),
            acc.empty / runs,
            acc.wrong / runs,
            acc.ok / runs,
        ));
    }
    out
}

/// Per-seed rows (one line per grid cell actually executed).
fn render_seed_rows(rows: &[SummaryRecord]) -> String {
    let mut out = String::from("retriever,seed,k,n,bleu,comet,lacomet,empty,wrong_language,ok\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.retriever,
            row.seed.map(|s| s.to_string()).unwrap_or_default(),
            row.k,
            row.n,
            fmt_opt(row.bleu),
            fmt_opt(row.comet),
            fmt_opt(row.lacomet),
            row.counts.empty,
            row.counts.wrong_language,
            row.counts.ok,
        ));
    }
    out
}

/// Execute the full pipeline for a validated config.
pub fn run_experiment(config: ExperimentConfig) -> Result<RunManifest, HarnessError> {
    Runner::new(config).run_until(Stage::Analyze)
}
