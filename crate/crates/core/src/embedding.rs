//! Sentence-embedding storage, remote fetching, and exact cosine k-NN.
//!
//! Vectors are held row-major in 32-bit floats and unit-normalized at load
//! time; dot products accumulate in 64-bit to keep rankings stable near ties.
//! Search is an exact full scan: pools stay small enough (tens of thousands of
//! rows) that approximate indexes would only buy irreproducibility.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Unit-normalized embedding rows keyed by pair id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    /// Row-major, `ids.len() * dim` entries.
    vectors: Vec<f32>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector for id {0:?} cannot be normalized")]
    ZeroVector(String),
    #[error("malformed embedding record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("k={k} exceeds matrix size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("provider returned HTTP {0}")]
    HttpError(u16),
    #[error("provider request timed out")]
    Timeout,
    #[error("provider returned dimension {got}, expected {expected}")]
    ProviderDimMismatch { expected: usize, got: usize },
    #[error("provider response malformed: {0}")]
    ProviderResponse(String),
}

impl EmbeddingMatrix {
    /// Build a matrix from id/vector pairs, normalizing each row to unit L2.
    pub fn from_rows(rows: Vec<(String, Vec<f32>)>) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        let mut by_id = HashMap::with_capacity(rows.len());
        for (row_idx, (id, mut vec)) in rows.into_iter().enumerate() {
            if vec.len() != dim {
                return Err(EmbeddingError::DimensionMismatch { expected: dim, got: vec.len() });
            }
            normalize(&mut vec).map_err(|_| EmbeddingError::ZeroVector(id.clone()))?;
            if by_id.insert(id.clone(), row_idx).is_some() {
                return Err(EmbeddingError::MalformedRecord {
                    line: row_idx + 1,
                    reason: format!("duplicate id {id:?}"),
                });
            }
            ids.push(id);
            vectors.extend_from_slice(&vec);
        }
        Ok(EmbeddingMatrix { ids, dim, vectors, by_id })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, idx: usize) -> &[f32] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn row_for(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|&i| self.row(i))
    }

    /// Replace row ids positionally (e.g. relabel fetched rows with pair ids).
    pub fn relabel(&self, ids: Vec<String>) -> Result<Self, EmbeddingError> {
        if ids.len() != self.ids.len() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.ids.len(),
                got: ids.len(),
            });
        }
        let mut by_id = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(EmbeddingError::MalformedRecord {
                    line: i + 1,
                    reason: format!("duplicate id {id:?}"),
                });
            }
        }
        Ok(EmbeddingMatrix { ids, dim: self.dim, vectors: self.vectors.clone(), by_id })
    }
}

fn normalize(vec: &mut [f32]) -> Result<(), ()> {
    let norm_sq: f64 = vec.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
    if norm_sq == 0.0 || !norm_sq.is_finite() {
        return Err(());
    }
    let inv = 1.0 / norm_sq.sqrt();
    for x in vec.iter_mut() {
        *x = (f64::from(*x) * inv) as f32;
    }
    Ok(())
}

/// Load a JSONL embedding file: one `{"id": str, "vector": [float]}` per line.
/// Rows are unit-normalized in place; id order is file order.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    let raw = fs::read_to_string(path).map_err(|e| EmbeddingError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut rows = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        #[derive(Deserialize)]
        struct Record {
            id: String,
            vector: Vec<f32>,
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| {
            EmbeddingError::MalformedRecord { line: idx + 1, reason: e.to_string() }
        })?;
        match dim {
            None => dim = Some(rec.vector.len()),
            Some(d) if d != rec.vector.len() => {
                return Err(EmbeddingError::DimensionMismatch { expected: d, got: rec.vector.len() })
            }
            _ => {}
        }
        rows.push((rec.id, rec.vector));
    }
    EmbeddingMatrix::from_rows(rows)
}

/// Write a matrix back out in the JSONL embedding layout.
pub fn save_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<(), EmbeddingError> {
    let mut out = String::new();
    for (i, id) in matrix.ids().iter().enumerate() {
        let rec = serde_json::json!({ "id": id, "vector": matrix.row(i) });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|e| EmbeddingError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Write via a temp file in the target directory, then rename into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    Ok(dot_f64(u, v).clamp(-1.0, 1.0))
}

pub(crate) fn dot_f64(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

/// Exact top-k rows by descending cosine similarity; ties break toward the
/// smaller row index.
pub fn knn(
    query: &[f32],
    matrix: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<(String, f64)>, EmbeddingError> {
    if k > matrix.len() {
        return Err(EmbeddingError::KTooLarge { k, n: matrix.len() });
    }
    if !matrix.is_empty() && query.len() != matrix.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: matrix.dim(),
            got: query.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = (0..matrix.len())
        .map(|i| (i, dot_f64(query, matrix.row(i)).clamp(-1.0, 1.0)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (matrix.ids()[i].clone(), s))
        .collect())
}

/// Remote embedding provider settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_batch_size() -> usize {
    32
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_retries() -> usize {
    2
}

/// HTTP client for an embeddings endpoint with an on-disk response cache.
///
/// The wire protocol is `POST {"model", "input": [str]}` returning
/// `{"data": [{"index", "embedding"}]}`. Responses are cached per
/// (model, text) under the cache directory; cache writes go through a temp
/// file plus rename so concurrent readers never observe partial entries.
pub struct EmbeddingProvider {
    cfg: ProviderConfig,
    cache_dir: Option<PathBuf>,
    client: reqwest::blocking::Client,
    requests: AtomicUsize,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

impl EmbeddingProvider {
    pub fn new(cfg: ProviderConfig, cache_dir: Option<PathBuf>) -> Self {
        assert!(cfg.batch_size >= 1, "batch size must be at least 1");
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .expect("http client");
        EmbeddingProvider { cfg, cache_dir, client, requests: AtomicUsize::new(0) }
    }

    /// Network requests issued so far (cache hits do not count).
    pub fn requests_made(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn model(&self) -> &str {
        &self.cfg.model
    }

    /// Embed `texts` in order, serving from the disk cache where possible.
    /// Row ids are the 0-based input positions; use
    /// [`EmbeddingMatrix::relabel`] to key rows by pair id.
    pub fn fetch_embeddings(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbeddingError> {
        let mut vectors: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        let mut missing: Vec<usize> = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            match self.cache_lookup(text) {
                Some(v) => vectors[i] = Some(v),
                None => missing.push(i),
            }
        }
        for batch in missing.chunks(self.cfg.batch_size.max(1)) {
            let inputs: Vec<String> = batch.iter().map(|&i| texts[i].clone()).collect();
            let fetched = self.request_batch(&inputs)?;
            if fetched.len() != batch.len() {
                return Err(EmbeddingError::ProviderResponse(format!(
                    "expected {} vectors, got {}",
                    batch.len(),
                    fetched.len()
                )));
            }
            for (&i, vec) in batch.iter().zip(fetched) {
                self.cache_store(&texts[i], &vec)?;
                vectors[i] = Some(vec);
            }
        }
        let mut expected_dim: Option<usize> = None;
        let rows: Vec<(String, Vec<f32>)> = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| (i.to_string(), v.expect("all rows resolved")))
            .collect();
        for (_, v) in &rows {
            match expected_dim {
                None => expected_dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(EmbeddingError::ProviderDimMismatch { expected: d, got: v.len() })
                }
                _ => {}
            }
        }
        EmbeddingMatrix::from_rows(rows)
    }

    fn request_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        let body = EmbeddingRequest { model: &self.cfg.model, input: inputs };
        let mut last_err = EmbeddingError::Timeout;
        for _attempt in 0..=self.cfg.retries {
            self.requests.fetch_add(1, Ordering::SeqCst);
            let sent = self.client.post(&self.cfg.endpoint).json(&body).send();
            match sent {
                Err(e) if e.is_timeout() => last_err = EmbeddingError::Timeout,
                Err(e) => {
                    last_err = EmbeddingError::ProviderResponse(e.to_string());
                }
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if resp.status().is_success() {
                        let parsed: EmbeddingResponse = resp
                            .json()
                            .map_err(|e| EmbeddingError::ProviderResponse(e.to_string()))?;
                        let mut data = parsed.data;
                        data.sort_by_key(|d| d.index);
                        return Ok(data.into_iter().map(|d| d.embedding).collect());
                    }
                    last_err = EmbeddingError::HttpError(status);
                    // Only rate limits and server errors are worth retrying.
                    if status != 429 && !(500..600).contains(&status) {
                        return Err(last_err);
                    }
                }
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Err(last_err)
    }

    fn cache_path(&self, text: &str) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let model_slug = hex_digest(self.cfg.model.as_bytes());
        let text_hash = hex_digest(text.as_bytes());
        Some(dir.join("embeddings").join(&model_slug[..16]).join(format!("{text_hash}.json")))
    }

    fn cache_lookup(&self, text: &str) -> Option<Vec<f32>> {
        let path = self.cache_path(text)?;
        let raw = fs::read_to_string(path).ok()?;
        serde_json::from_str(&raw).ok()
    }

    fn cache_store(&self, text: &str, vec: &[f32]) -> Result<(), EmbeddingError> {
        let Some(path) = self.cache_path(text) else {
            return Ok(());
        };
        let body = serde_json::to_vec(vec).expect("serialize vector");
        write_atomic(&path, &body).map_err(|e| EmbeddingError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
