//! MT evaluation: BLEU, language identification, and language-aware score
//! gating over externally produced COMET scores.
//!
//! The neural scorer itself is never run here; per-segment scores are
//! ingested from a JSONL file or an HTTP scorer endpoint and then gated: a
//! hypothesis that is empty (after Unicode-whitespace trim) or detected in
//! the wrong target language scores 0, otherwise the ingested score passes
//! through untouched.

pub mod bleu;
pub mod langid;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LangCode;

pub use bleu::{corpus_bleu, corpus_bleu_with, sentence_bleu, BleuTokenizer};
pub use langid::{train_langid, LangIdModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty text")]
    EmptyText,
    #[error("no language prediction stored for segment {0:?}")]
    MissingPrediction(String),
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {left} hypotheses vs {right} references")]
    LengthMismatch { left: usize, right: usize },
    #[error("no score for segment {0:?}")]
    MissingScore(String),
    #[error("segment {0:?} has not been gated")]
    UngatedSegment(String),
    #[error("scorer returned HTTP {0}")]
    HttpError(u16),
    #[error("scorer request failed: {0}")]
    ScorerTransport(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

/// Where language predictions come from: the built-in classifier or a
/// prediction file keyed by segment id.
pub enum LangIdSource {
    Model(LangIdModel),
    File(HashMap<String, LangCode>),
}

impl LangIdSource {
    /// Load JSONL predictions: one `{"id": str, "lang": str}` per line.
    pub fn from_predictions_file(path: &Path) -> Result<Self, EvalError> {
        let raw = fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut map = HashMap::new();
        for (idx, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Record {
                id: String,
                lang: LangCode,
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| {
                EvalError::MalformedRecord { line: idx + 1, reason: e.to_string() }
            })?;
            map.insert(rec.id, rec.lang);
        }
        Ok(LangIdSource::File(map))
    }

    /// Predicted language of a segment. Model mode classifies the text;
    /// file mode returns the stored prediction for the segment id verbatim.
    pub fn predict(&self, id: &str, text: &str) -> Result<LangCode, EvalError> {
        if text.trim().is_empty() {
            return Err(EvalError::EmptyText);
        }
        match self {
            LangIdSource::Model(model) => model.classify(text),
            LangIdSource::File(map) => map
                .get(id)
                .cloned()
                .ok_or_else(|| EvalError::MissingPrediction(id.to_string())),
        }
    }
}

/// Detect the language of a text via the given source (see
/// [`LangIdSource::predict`]).
pub fn detect_language(
    text: &str,
    source: &LangIdSource,
    segment_id: &str,
) -> Result<LangCode, EvalError> {
    source.predict(segment_id, text)
}

/// One hypothesis with everything needed for gated scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentEval {
    pub id: String,
    pub source: String,
    pub hypothesis: String,
    pub reference: String,
    pub target_lang: LangCode,
    pub comet_score: Option<f64>,
    pub lang_pred: Option<LangCode>,
    pub gated_score: Option<f64>,
}

impl SegmentEval {
    pub fn new(
        id: &str,
        source: &str,
        hypothesis: &str,
        reference: &str,
        target_lang: LangCode,
    ) -> Self {
        SegmentEval {
            id: id.to_string(),
            source: source.to_string(),
            hypothesis: hypothesis.to_string(),
            reference: reference.to_string(),
            target_lang,
            comet_score: None,
            lang_pred: None,
            gated_score: None,
        }
    }
}

/// The gating rule: 0 for an empty hypothesis, 0 for a wrong-language
/// prediction, otherwise the ingested score unchanged. `lang_pred` may be
/// `None` only for hypotheses that gate on emptiness anyway; a non-empty
/// hypothesis without a prediction cannot be confirmed and scores 0.
pub fn la_gate(
    hypothesis: &str,
    target_lang: &LangCode,
    comet_score: f64,
    lang_pred: Option<&LangCode>,
) -> f64 {
    if hypothesis.trim().is_empty() {
        return 0.0;
    }
    match lang_pred {
        Some(pred) if pred == target_lang => comet_score,
        _ => 0.0,
    }
}

/// Resolve language predictions and gated scores for every segment.
/// Each segment must already carry its ingested score.
pub fn gate_segments(
    segments: &mut [SegmentEval],
    langid: &LangIdSource,
) -> Result<(), EvalError> {
    for seg in segments.iter_mut() {
        let score = seg
            .comet_score
            .ok_or_else(|| EvalError::MissingScore(seg.id.clone()))?;
        if !seg.hypothesis.trim().is_empty() {
            seg.lang_pred = Some(langid.predict(&seg.id, &seg.hypothesis)?);
        }
        seg.gated_score = Some(la_gate(
            &seg.hypothesis,
            &seg.target_lang,
            score,
            seg.lang_pred.as_ref(),
        ));
    }
    Ok(())
}

/// Corpus-level gated score: the mean of gated segment scores on the 0..100
/// scale.
pub fn corpus_lacomet(segments: &[SegmentEval]) -> Result<f64, EvalError> {
    if segments.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sum = 0.0;
    for seg in segments {
        sum += seg
            .gated_score
            .ok_or_else(|| EvalError::UngatedSegment(seg.id.clone()))?;
    }
    Ok(sum / segments.len() as f64 * 100.0)
}

/// Hypothesis triage counts; `empty` takes precedence over `wrong_language`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub empty: usize,
    pub wrong_language: usize,
    pub ok: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.empty + self.wrong_language + self.ok
    }
}

/// Assign each (id, hypothesis) to exactly one category.
pub fn error_categories(
    entries: &[(String, String)],
    target_lang: &LangCode,
    langid: &LangIdSource,
) -> Result<ErrorCounts, EvalError> {
    let mut counts = ErrorCounts::default();
    for (id, hyp) in entries {
        if hyp.trim().is_empty() {
            counts.empty += 1;
        } else if langid.predict(id, hyp)? != *target_lang {
            counts.wrong_language += 1;
        } else {
            counts.ok += 1;
        }
    }
    Ok(counts)
}

/// Where segment scores come from.
pub enum CometSource {
    /// JSONL file of `{"id": str, "score": float}` records.
    File(HashMap<String, f64>),
    /// HTTP scorer: `POST {"src": [...], "mt": [...], "ref": [...]}`
    /// returning `{"scores": [float]}`.
    Endpoint { url: String, timeout_secs: u64 },
}

impl CometSource {
    pub fn from_scores_file(path: &Path) -> Result<Self, EvalError> {
        let raw = fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut map = HashMap::new();
        for (idx, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Record {
                id: String,
                score: f64,
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| {
                EvalError::MalformedRecord { line: idx + 1, reason: e.to_string() }
            })?;
            map.insert(rec.id, rec.score);
        }
        Ok(CometSource::File(map))
    }

    /// Fill `comet_score` on every segment.
    pub fn assign(&self, segments: &mut [SegmentEval]) -> Result<(), EvalError> {
        match self {
            CometSource::File(map) => {
                for seg in segments.iter_mut() {
                    seg.comet_score = Some(
                        map.get(&seg.id)
                            .copied()
                            .ok_or_else(|| EvalError::MissingScore(seg.id.clone()))?,
                    );
                }
                Ok(())
            }
            CometSource::Endpoint { url, timeout_secs } => {
                #[derive(Serialize)]
                struct Request<'a> {
                    src: Vec<&'a str>,
                    mt: Vec<&'a str>,
                    #[serde(rename = "ref")]
                    reference: Vec<&'a str>,
                }
                #[derive(Deserialize)]
                struct Response {
                    scores: Vec<f64>,
                }
                let body = Request {
                    src: segments.iter().map(|s| s.source.as_str()).collect(),
                    mt: segments.iter().map(|s| s.hypothesis.as_str()).collect(),
                    reference: segments.iter().map(|s| s.reference.as_str()).collect(),
                };
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(*timeout_secs))
                    .build()
                    .expect("http client");
                let resp = client
                    .post(url)
                    .json(&body)
                    .send()
                    .map_err(|e| EvalError::ScorerTransport(e.to_string()))?;
                if !resp.status().is_success() {
                    return Err(EvalError::HttpError(resp.status().as_u16()));
                }
                let parsed: Response = resp
                    .json()
                    .map_err(|e| EvalError::ScorerTransport(e.to_string()))?;
                if parsed.scores.len() != segments.len() {
                    return Err(EvalError::LengthMismatch {
                        left: parsed.scores.len(),
                        right: segments.len(),
                    });
                }
                for (seg, score) in segments.iter_mut().zip(parsed.scores) {
                    seg.comet_score = Some(score);
                }
                Ok(())
            }
        }
    }
}
