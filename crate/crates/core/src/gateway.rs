//! Completion-endpoint client with on-disk caching, decode-protocol
//! post-processing, and perplexity from token log-probabilities.
//!
//! The wire protocol is the de-facto completions shape:
//! `POST {"model", "prompt", "max_tokens", "logprobs", "stop", ...}` returning
//! `{"choices": [{"text", "logprobs"}]}`. Beam width is passed through as a
//! hint; backends that reject it are retried greedily with a logged warning.
//!
//! Generations are cached in an append-only JSONL of [`GenerationRecord`]s
//! keyed by (endpoint, model, params, prompt bytes), so re-running an
//! experiment replays the cache without network traffic.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::hex_digest;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend returned HTTP {0}")]
    HttpError(u16),
    #[error("request timed out")]
    Timeout,
    #[error("backend refused request parameters: {0}")]
    BackendRefusedParams(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("empty input")]
    EmptyInput,
    #[error("log-probability {0} is positive")]
    PositiveLogprob(f64),
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Decoding parameters sent with every completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_tokens: u32,
    /// Decode hint; not all backends support beamed completions.
    pub beam_width: Option<u32>,
    pub stop: Vec<String>,
    pub temperature: f64,
    /// Ask the backend for per-token log-probabilities.
    pub logprobs: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            max_tokens: 100,
            beam_width: Some(2),
            stop: Vec::new(),
            temperature: 0.0,
            logprobs: false,
        }
    }
}

/// Completion backend coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_retries() -> usize {
    2
}
fn default_max_in_flight() -> usize {
    4
}

/// One observed generation; these records are the cache lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_hash: String,
    pub endpoint: String,
    pub model: String,
    pub params: GenParams,
    pub raw_output: String,
    pub postprocessed_output: Option<String>,
    pub token_logprobs: Option<Vec<f64>>,
    pub timestamp: u64,
}

/// How to trim raw completions into hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub enum PostprocessMode {
    /// Keep the raw output.
    None,
    /// Zero-shot rule: keep everything before the first newline.
    ZeroShot,
    /// Few-shot rule: cut at the first blank line or at the template's
    /// next-example header, whichever comes first, then trim the tail.
    FewShot { header: String },
}

/// Truncate a zero-shot prediction at the first line break.
pub fn postprocess_zero_shot(raw: &str) -> String {
    match raw.find('\n') {
        Some(pos) => raw[..pos].to_string(),
        None => raw.to_string(),
    }
}

/// Truncate a few-shot prediction at the prompt-format boundary: the first
/// blank line or the next example header.
pub fn postprocess_few_shot(raw: &str, header: &str) -> String {
    let mut cut = raw.len();
    if let Some(pos) = raw.find("\n\n") {
        cut = cut.min(pos);
    }
    if !header.is_empty() {
        if raw.starts_with(header) {
            cut = 0;
        } else if let Some(pos) = raw.find(&format!("\n{header}")) {
            cut = cut.min(pos);
        }
    }
    raw[..cut].trim_end().to_string()
}

pub fn apply_postprocess(raw: &str, mode: &PostprocessMode) -> String {
    match mode {
        PostprocessMode::None => raw.to_string(),
        PostprocessMode::ZeroShot => postprocess_zero_shot(raw),
        PostprocessMode::FewShot { header } => postprocess_few_shot(raw, header),
    }
}

/// `exp(-mean(logprobs))` over natural-log token probabilities. At least 1;
/// exactly 1 when every token had probability 1.
pub fn perplexity_from_logprobs(logprobs: &[f64]) -> Result<f64, GatewayError> {
    if logprobs.is_empty() {
        return Err(GatewayError::EmptyInput);
    }
    for &lp in logprobs {
        if lp > 0.0 {
            return Err(GatewayError::PositiveLogprob(lp));
        }
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    logprobs: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<String>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    beam_width: Option<u32>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    logprobs: Option<LogprobsField>,
}

/// Backends report token logprobs either as a bare array or wrapped in the
/// usual `{"token_logprobs": [...]}` object.
#[derive(Deserialize)]
#[serde(untagged)]
enum LogprobsField {
    Plain(Vec<f64>),
    Object { token_logprobs: Vec<f64> },
}

impl LogprobsField {
    fn into_vec(self) -> Vec<f64> {
        match self {
            LogprobsField::Plain(v) => v,
            LogprobsField::Object { token_logprobs } => token_logprobs,
        }
    }
}

/// Caching completion client. Clone-free: share by reference across worker
/// threads (all interior state is synchronized).
pub struct Gateway {
    endpoint: EndpointConfig,
    client: reqwest::blocking::Client,
    cache: Mutex<HashMap<String, GenerationRecord>>,
    cache_file: Option<Mutex<fs::File>>,
    cache_path: Option<PathBuf>,
    requests: AtomicUsize,
}

impl Gateway {
    /// Open a gateway; when `cache_path` is given, existing records are
    /// loaded and new ones appended.
    pub fn new(endpoint: EndpointConfig, cache_path: Option<&Path>) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .expect("http client");
        let mut cache = HashMap::new();
        let mut cache_file = None;
        if let Some(path) = cache_path {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| GatewayError::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?;
            }
            if path.exists() {
                let raw = fs::read_to_string(path).map_err(|e| GatewayError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                for line in raw.lines() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    // a torn final line from an interrupted run is skipped
                    if let Ok(record) = serde_json::from_str::<GenerationRecord>(line) {
                        cache.insert(Self::record_key(&record), record);
                    }
                }
            }
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GatewayError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
            cache_file = Some(Mutex::new(file));
        }
        Ok(Gateway {
            endpoint,
            client,
            cache: Mutex::new(cache),
            cache_file,
            cache_path: cache_path.map(Path::to_path_buf),
            requests: AtomicUsize::new(0),
        })
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    pub fn cache_path(&self) -> Option<&Path> {
        self.cache_path.as_deref()
    }

    /// Network requests issued so far (cache hits do not count).
    pub fn requests_made(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn prompt_hash(prompt: &str) -> String {
        hex_digest(prompt.as_bytes())
    }

    fn cache_key(endpoint: &str, model: &str, params: &GenParams, prompt_hash: &str) -> String {
        let params_json = serde_json::to_string(params).expect("params serialize");
        hex_digest(format!("{endpoint}\n{model}\n{params_json}\n{prompt_hash}").as_bytes())
    }

    fn record_key(record: &GenerationRecord) -> String {
        Self::cache_key(&record.endpoint, &record.model, &record.params, &record.prompt_hash)
    }

    /// Complete one prompt, serving from cache when the same (endpoint,
    /// model, params, prompt) has been seen. Post-processing is recomputed
    /// from the raw output with the mode passed here, so a cache written
    /// under one mode stays valid under another.
    pub fn generate(
        &self,
        prompt: &str,
        params: &GenParams,
        postprocess: &PostprocessMode,
    ) -> Result<GenerationRecord, GatewayError> {
        let prompt_hash = Self::prompt_hash(prompt);
        let key = Self::cache_key(&self.endpoint.url, &self.endpoint.model, params, &prompt_hash);
        if let Some(mut hit) = self.cache.lock().unwrap().get(&key).cloned() {
            hit.postprocessed_output = Some(apply_postprocess(&hit.raw_output, postprocess));
            return Ok(hit);
        }
        let (raw_output, token_logprobs) = self.request_completion(prompt, params)?;
        let record = GenerationRecord {
            prompt_hash,
            endpoint: self.endpoint.url.clone(),
            model: self.endpoint.model.clone(),
            params: params.clone(),
            postprocessed_output: Some(apply_postprocess(&raw_output, postprocess)),
            raw_output,
            token_logprobs,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        if let Some(file) = &self.cache_file {
            let line = serde_json::to_string(&record).expect("record serialize");
            let mut guard = file.lock().unwrap();
            writeln!(guard, "{line}").and_then(|_| guard.flush()).map_err(|e| {
                GatewayError::Io {
                    path: self
                        .cache_path
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default(),
                    source: e,
                }
            })?;
        }
        self.cache.lock().unwrap().insert(key, record.clone());
        Ok(record)
    }

    /// Complete many prompts with at most `max_in_flight` concurrent
    /// requests. Per-item failures are returned in place; order matches the
    /// input.
    pub fn generate_batch(
        &self,
        prompts: &[(String, String)],
        params: &GenParams,
        postprocess_for: impl Fn(&str) -> PostprocessMode + Sync,
    ) -> Vec<(String, Result<GenerationRecord, GatewayError>)> {
        let workers = self.endpoint.max_in_flight.max(1).min(prompts.len().max(1));
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<(String, Result<GenerationRecord, GatewayError>)>>> =
            (0..prompts.len()).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= prompts.len() {
                        break;
                    }
                    let (id, prompt) = &prompts[i];
                    let mode = postprocess_for(id);
                    let outcome = self.generate(prompt, params, &mode);
                    *results[i].lock().unwrap() = Some((id.clone(), outcome));
                });
            }
        });
        results
            .into_iter()
            .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
            .collect()
    }

    fn request_completion(
        &self,
        prompt: &str,
        params: &GenParams,
    ) -> Result<(String, Option<Vec<f64>>), GatewayError> {
        match self.request_once_with_retries(prompt, params, params.beam_width) {
            Err(GatewayError::BackendRefusedParams(reason)) if params.beam_width.is_some() => {
                log::warn!(
                    "backend refused decode hints ({reason}); degrading to greedy decoding"
                );
                self.request_once_with_retries(prompt, params, None)
            }
            other => other,
        }
    }

    fn request_once_with_retries(
        &self,
        prompt: &str,
        params: &GenParams,
        beam_width: Option<u32>,
    ) -> Result<(String, Option<Vec<f64>>), GatewayError> {
        let body = CompletionRequest {
            model: &self.endpoint.model,
            prompt,
            max_tokens: params.max_tokens,
            logprobs: params.logprobs,
            stop: params.stop.clone(),
            temperature: params.temperature,
            beam_width,
        };
        let mut last_err = GatewayError::Timeout;
        for _attempt in 0..=self.endpoint.retries {
            self.requests.fetch_add(1, Ordering::SeqCst);
            match self.client.post(&self.endpoint.url).json(&body).send() {
                Err(e) if e.is_timeout() => last_err = GatewayError::Timeout,
                Err(e) => last_err = GatewayError::Transport(e.to_string()),
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if resp.status().is_success() {
                        let parsed: CompletionResponse = resp
                            .json()
                            .map_err(|e| GatewayError::Malformed(e.to_string()))?;
                        let choice = parsed
                            .choices
                            .into_iter()
                            .next()
                            .ok_or_else(|| GatewayError::Malformed("no choices".into()))?;
                        return Ok((choice.text, choice.logprobs.map(LogprobsField::into_vec)));
                    }
                    if status == 400 {
                        let text = resp.text().unwrap_or_default();
                        if beam_width.is_some() && text.to_lowercase().contains("beam") {
                            return Err(GatewayError::BackendRefusedParams(text));
                        }
                        return Err(GatewayError::HttpError(400));
                    }
                    last_err = GatewayError::HttpError(status);
                    if status != 429 && !(500..600).contains(&status) {
                        return Err(last_err);
                    }
                }
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Err(last_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shot_truncates_at_first_newline() {
        assert_eq!(postprocess_zero_shot("Bonjour\nmonde"), "Bonjour");
        assert_eq!(postprocess_zero_shot("Bonjour"), "Bonjour");
        assert_eq!(postprocess_zero_shot("\nBonjour"), "");
    }

    #[test]
    fn zero_shot_is_idempotent() {
        for raw in ["Bonjour\nmonde", "Bonjour", "\nBonjour", ""] {
            let once = postprocess_zero_shot(raw);
            assert_eq!(postprocess_zero_shot(&once), once);
        }
    }

    #[test]
    fn few_shot_cuts_at_blank_line_or_header() {
        assert_eq!(
            postprocess_few_shot("Bonjour le monde.\n\nsuite", "English sentence"),
            "Bonjour le monde."
        );
        assert_eq!(
            postprocess_few_shot("Bonjour.\nEnglish sentence\nNext one.", "English sentence"),
            "Bonjour."
        );
        assert_eq!(postprocess_few_shot("English sentence\nimmediate", "English sentence"), "");
        assert_eq!(postprocess_few_shot("Bonjour.", "English sentence"), "Bonjour.");
    }

    #[test]
    fn perplexity_closed_forms() {
        assert_eq!(perplexity_from_logprobs(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        let two = perplexity_from_logprobs(&[-(2.0f64.ln()), -(2.0f64.ln())]).unwrap();
        assert!((two - 2.0).abs() < 1e-12);
        assert!(matches!(perplexity_from_logprobs(&[]), Err(GatewayError::EmptyInput)));
        assert!(matches!(
            perplexity_from_logprobs(&[0.1]),
            Err(GatewayError::PositiveLogprob(_))
        ));
    }

    #[test]
    fn perplexity_at_least_one() {
        let values = [-0.5, -1.25, -0.01];
        assert!(perplexity_from_logprobs(&values).unwrap() >= 1.0);
    }

    #[test]
    fn cache_key_changes_with_params() {
        let a = Gateway::cache_key("http://x", "m", &GenParams::default(), "h");
        let mut params = GenParams::default();
        params.max_tokens = 50;
        let b = Gateway::cache_key("http://x", "m", &params, "h");
        assert_ne!(a, b);
        let c = Gateway::cache_key("http://x", "m", &GenParams::default(), "h");
        assert_eq!(a, c);
    }
}
