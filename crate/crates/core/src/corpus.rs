//! Parallel-corpus ingestion and selection-pool composition.
//!
//! A [`Pool`] is an ordered set of [`ParallelPair`]s drawn from a high-quality
//! corpus prefix optionally extended with a noisier corpus prefix. Pools are
//! immutable after construction and safe to share across worker threads.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RankedExample;

/// Three-letter lowercase language identifier (e.g. `eng`, `fra`, `swh`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LangCode(String);

impl LangCode {
    pub fn new(code: &str) -> Result<Self, CorpusError> {
        if code.len() == 3 && code.bytes().all(|b| b.is_ascii_lowercase()) {
            Ok(LangCode(code.to_string()))
        } else {
            Err(CorpusError::InvalidLangCode(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for LangCode {
    type Error = CorpusError;
    fn try_from(s: String) -> Result<Self, CorpusError> {
        LangCode::new(&s)
    }
}

impl From<LangCode> for String {
    fn from(l: LangCode) -> String {
        l.0
    }
}

impl std::str::FromStr for LangCode {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, CorpusError> {
        LangCode::new(s)
    }
}

/// Provenance of a parallel pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    FloresDev,
    FloresDevtest,
    Nllb,
    Other,
}

impl Origin {
    /// Stable tag used when synthesizing pair ids (`<tag>-<line index>`).
    pub fn tag(self) -> &'static str {
        match self {
            Origin::FloresDev => "FLORES_DEV",
            Origin::FloresDevtest => "FLORES_DEVTEST",
            Origin::Nllb => "NLLB",
            Origin::Other => "OTHER",
        }
    }
}

impl std::str::FromStr for Origin {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, CorpusError> {
        match s.to_ascii_uppercase().as_str() {
            "FLORES_DEV" => Ok(Origin::FloresDev),
            "FLORES_DEVTEST" => Ok(Origin::FloresDevtest),
            "NLLB" => Ok(Origin::Nllb),
            "OTHER" => Ok(Origin::Other),
            other => Err(CorpusError::InvalidOrigin(other.to_string())),
        }
    }
}

/// One (source, target) sentence pair with provenance and language tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub id: String,
    pub source_text: String,
    pub target_text: String,
    pub source_lang: LangCode,
    pub target_lang: LangCode,
    pub origin: Origin,
}

/// Ordered selection pool with composition counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pool {
    pairs: Vec<ParallelPair>,
    n_flores: usize,
    n_nllb: usize,
    #[serde(skip)]
    by_id: HashMap<String, usize>,
}

impl Pool {
    /// Wrap an arbitrary pair list as a pool. Counts are derived from origins.
    pub fn from_pairs(pairs: Vec<ParallelPair>) -> Self {
        let n_flores = pairs.iter().filter(|p| p.origin == Origin::FloresDev).count();
        let n_nllb = pairs.iter().filter(|p| p.origin == Origin::Nllb).count();
        let by_id = index_ids(&pairs);
        Pool { pairs, n_flores, n_nllb, by_id }
    }

    pub fn pairs(&self) -> &[ParallelPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_flores(&self) -> usize {
        self.n_flores
    }

    pub fn n_nllb(&self) -> usize {
        self.n_nllb
    }

    pub fn get(&self, id: &str) -> Option<&ParallelPair> {
        self.by_id.get(id).map(|&i| &self.pairs[i])
    }

    /// Position of a pair in pool order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

fn index_ids(pairs: &[ParallelPair]) -> HashMap<String, usize> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.clone(), i))
        .collect()
}

/// On-disk corpus layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One JSON object per line; field names default to `src`/`tgt`.
    Jsonl,
    /// `source<TAB>target`, no header.
    Tsv,
}

/// JSONL field names, overridable per corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsonlFields {
    pub source: String,
    pub target: String,
    /// Optional explicit id field; ids are synthesized when absent.
    pub id: Option<String>,
}

impl Default for JsonlFields {
    fn default() -> Self {
        JsonlFields { source: "src".into(), target: "tgt".into(), id: None }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid language code {0:?}: expected exactly 3 ASCII lowercase letters")]
    InvalidLangCode(String),
    #[error("unknown corpus origin {0:?}")]
    InvalidOrigin(String),
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("pool too small: requested {requested} pairs from a list of {available}")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("empty input")]
    EmptyInput,
}

/// Load a parallel corpus file into pairs, in file order.
///
/// Ids are synthesized as `<origin tag>-<0-based line index>` unless the JSONL
/// record carries an explicit id field. Line numbers in errors are 1-based.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    origin: Origin,
    source_lang: &LangCode,
    target_lang: &LangCode,
    fields: &JsonlFields,
) -> Result<Vec<ParallelPair>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut pairs = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, src, tgt) = match format {
            CorpusFormat::Jsonl => parse_jsonl_line(line, idx, fields)?,
            CorpusFormat::Tsv => parse_tsv_line(line, idx)?,
        };
        let src = src.trim();
        let tgt = tgt.trim();
        if src.is_empty() {
            return Err(malformed(idx, "empty source text"));
        }
        if tgt.is_empty() {
            return Err(malformed(idx, "empty target text"));
        }
        pairs.push(ParallelPair {
            id: id.unwrap_or_else(|| format!("{}-{}", origin.tag(), idx)),
            source_text: src.to_string(),
            target_text: tgt.to_string(),
            source_lang: source_lang.clone(),
            target_lang: target_lang.clone(),
            origin,
        });
    }
    Ok(pairs)
}

fn malformed(idx: usize, reason: &str) -> CorpusError {
    CorpusError::MalformedRecord { line: idx + 1, reason: reason.to_string() }
}

fn parse_jsonl_line(
    line: &str,
    idx: usize,
    fields: &JsonlFields,
) -> Result<(Option<String>, String, String), CorpusError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| malformed(idx, &format!("invalid JSON: {e}")))?;
    let get = |key: &str| -> Result<String, CorpusError> {
        value
            .get(key)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| malformed(idx, &format!("missing string field {key:?}")))
    };
    let id = match &fields.id {
        Some(key) => Some(get(key)?),
        None => None,
    };
    Ok((id, get(&fields.source)?, get(&fields.target)?))
}

fn parse_tsv_line(line: &str, idx: usize) -> Result<(Option<String>, String, String), CorpusError> {
    let mut cols = line.splitn(2, '\t');
    let src = cols.next().unwrap_or("");
    let tgt = cols
        .next()
        .ok_or_else(|| malformed(idx, "expected source<TAB>target"))?;
    Ok((None, src.to_string(), tgt.to_string()))
}

/// Build a pool from the first `n1` high-quality pairs and the first `n2`
/// extension pairs, in that order.
pub fn compose_pool(
    flores: &[ParallelPair],
    nllb: &[ParallelPair],
    n1: usize,
    n2: usize,
) -> Result<Pool, CorpusError> {
    if n1 > flores.len() {
        return Err(CorpusError::PoolTooSmall { requested: n1, available: flores.len() });
    }
    if n2 > nllb.len() {
        return Err(CorpusError::PoolTooSmall { requested: n2, available: nllb.len() });
    }
    let mut pairs = Vec::with_capacity(n1 + n2);
    pairs.extend_from_slice(&flores[..n1]);
    pairs.extend_from_slice(&nllb[..n2]);
    let by_id = index_ids(&pairs);
    Ok(Pool { pairs, n_flores: n1, n_nllb: n2, by_id })
}

/// Mean count, over queries, of selected examples originating from the
/// high-quality dev set.
pub fn flores_fraction(
    selections: &[Vec<RankedExample>],
    pool: &Pool,
) -> Result<f64, CorpusError> {
    if selections.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let total: usize = selections
        .iter()
        .map(|sel| {
            sel.iter()
                .filter(|r| {
                    pool.get(&r.pair_id)
                        .map(|p| p.origin == Origin::FloresDev)
                        .unwrap_or(false)
                })
                .count()
        })
        .sum();
    Ok(total as f64 / selections.len() as f64)
}
