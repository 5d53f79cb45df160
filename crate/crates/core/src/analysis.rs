//! Pool-composition analytics: Vendi-score diversity, average perplexity,
//! and per-composition quality reports.
//!
//! The Vendi score is the exponentiated Shannon entropy of the eigenvalues of
//! the normalized cosine kernel `K/n`, an effective-diversity count in
//! `[1, n]`. When the embedding dimension is smaller than the row count the
//! eigenvalues are taken from the d-by-d Gram dual, which has the identical
//! nonzero spectrum at a fraction of the cost.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Pool;
use crate::embedding::{dot_f64, EmbeddingMatrix};
use crate::gateway::{perplexity_from_logprobs, GatewayError};
use crate::retrieval::{avg_similarity, RankedExample, RetrievalError};

/// Eigenvalues below this are treated as exact zeros in the entropy sum.
const EIGENVALUE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("eigensolve failed: {0}")]
    NumericalFailure(String),
    #[error("no log-probabilities for pair {0:?}")]
    MissingLogprobs(String),
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

/// Which eigenproblem to solve for the Vendi score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VendiStrategy {
    /// Gram dual when `dim < n`, dense kernel otherwise.
    Auto,
    /// Always the n-by-n kernel `K/n`.
    Dense,
    /// Always the d-by-d Gram dual.
    GramDual,
}

/// Vendi score of a unit-normalized embedding matrix.
pub fn vendi_score(matrix: &EmbeddingMatrix) -> Result<f64, AnalysisError> {
    vendi_score_with(matrix, VendiStrategy::Auto)
}

pub fn vendi_score_with(
    matrix: &EmbeddingMatrix,
    strategy: VendiStrategy,
) -> Result<f64, AnalysisError> {
    let n = matrix.len();
    if n == 0 {
        return Err(AnalysisError::EmptyMatrix);
    }
    let d = matrix.dim();
    let use_dual = match strategy {
        VendiStrategy::Auto => d < n,
        VendiStrategy::Dense => false,
        VendiStrategy::GramDual => true,
    };
    let sym = if use_dual {
        // (1/n) X^T X: same nonzero spectrum as the kernel K/n = (1/n) X X^T.
        let mut m = DMatrix::<f64>::zeros(d, d);
        for row_idx in 0..n {
            let row = matrix.row(row_idx);
            for i in 0..d {
                let xi = f64::from(row[i]);
                for j in i..d {
                    m[(i, j)] += xi * f64::from(row[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        m / n as f64
    } else {
        let mut k = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot_f64(matrix.row(i), matrix.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k / n as f64
    };
    let eigenvalues = sym.symmetric_eigenvalues();
    let mut kept = Vec::with_capacity(eigenvalues.len());
    for &lambda in eigenvalues.iter() {
        if lambda.is_nan() {
            return Err(AnalysisError::NumericalFailure("NaN eigenvalue".into()));
        }
        if lambda < -1e-6 {
            return Err(AnalysisError::NumericalFailure(format!(
                "negative eigenvalue {lambda}"
            )));
        }
        if lambda > EIGENVALUE_FLOOR {
            kept.push(lambda);
        }
    }
    // The spectrum sums to 1 in exact arithmetic (unit rows give a unit
    // kernel diagonal); renormalizing absorbs the f32 storage error so that
    // degenerate spectra hit their closed forms exactly.
    let sum: f64 = kept.iter().sum();
    if sum <= 0.0 {
        return Err(AnalysisError::NumericalFailure("vanishing spectrum".into()));
    }
    let entropy = -kept
        .iter()
        .map(|&lambda| {
            let p = lambda / sum;
            p * p.ln()
        })
        .sum::<f64>();
    Ok(entropy.exp())
}

/// Supplier of per-pair token log-probabilities for the target side.
pub trait LogprobSource {
    fn logprobs(&self, pair_id: &str, target_text: &str) -> Result<Vec<f64>, AnalysisError>;
}

/// JSONL-backed log-probabilities: one `{"id": str, "logprobs": [float]}`
/// per line.
pub struct FileLogprobs {
    by_id: HashMap<String, Vec<f64>>,
}

impl FileLogprobs {
    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let raw = fs::read_to_string(path).map_err(|e| AnalysisError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut by_id = HashMap::new();
        for (idx, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Record {
                id: String,
                logprobs: Vec<f64>,
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| {
                AnalysisError::MalformedRecord { line: idx + 1, reason: e.to_string() }
            })?;
            by_id.insert(rec.id, rec.logprobs);
        }
        Ok(FileLogprobs { by_id })
    }

    pub fn from_map(by_id: HashMap<String, Vec<f64>>) -> Self {
        FileLogprobs { by_id }
    }
}

impl LogprobSource for FileLogprobs {
    fn logprobs(&self, pair_id: &str, _target_text: &str) -> Result<Vec<f64>, AnalysisError> {
        self.by_id
            .get(pair_id)
            .cloned()
            .ok_or_else(|| AnalysisError::MissingLogprobs(pair_id.to_string()))
    }
}

/// Mean per-sentence perplexity of the pool's target side.
pub fn avg_perplexity(pool: &Pool, source: &dyn LogprobSource) -> Result<f64, AnalysisError> {
    if pool.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut sum = 0.0;
    for pair in pool.pairs() {
        let lps = source.logprobs(&pair.id, &pair.target_text)?;
        sum += perplexity_from_logprobs(&lps)?;
    }
    Ok(sum / pool.len() as f64)
}

/// One pool composition's quality/diversity summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolReport {
    pub label: String,
    pub n_flores: usize,
    pub n_nllb: usize,
    pub vendi_score: f64,
    pub avg_perplexity: f64,
    /// Mean retrieval similarity per retriever label, at the report's k.
    pub avg_similarity: BTreeMap<String, f64>,
}

/// Assemble a composition report. `selections_by_retriever` holds each
/// retriever's per-query selections over this pool; their mean scores become
/// the similarity columns. Either the whole report is produced or the first
/// failing constituent aborts it.
pub fn pool_quality_report(
    label: &str,
    pool: &Pool,
    embeddings: &EmbeddingMatrix,
    logprob_source: &dyn LogprobSource,
    selections_by_retriever: &BTreeMap<String, Vec<Vec<RankedExample>>>,
) -> Result<PoolReport, AnalysisError> {
    let vendi = vendi_score(embeddings)?;
    let perplexity = avg_perplexity(pool, logprob_source)?;
    let mut similarity = BTreeMap::new();
    for (retriever, selections) in selections_by_retriever {
        similarity.insert(retriever.clone(), avg_similarity(selections)?);
    }
    Ok(PoolReport {
        label: label.to_string(),
        n_flores: pool.n_flores(),
        n_nllb: pool.n_nllb(),
        vendi_score: vendi,
        avg_perplexity: perplexity,
        avg_similarity: similarity,
    })
}

/// Render reports as CSV, one row per composition. Similarity columns are the
/// union of retriever labels across reports.
pub fn reports_to_csv(reports: &[PoolReport]) -> String {
    let mut retrievers: Vec<&str> = reports
        .iter()
        .flat_map(|r| r.avg_similarity.keys().map(String::as_str))
        .collect();
    retrievers.sort();
    retrievers.dedup();
    let mut out = String::from("label,n_flores,n_nllb,vendi_score,avg_perplexity");
    for r in &retrievers {
        out.push_str(&format!(",avg_similarity:{r}"));
    }
    out.push('\n');
    for report in reports {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4}",
            report.label, report.n_flores, report.n_nllb, report.vendi_score, report.avg_perplexity
        ));
        for r in &retrievers {
            match report.avg_similarity.get(*r) {
                Some(v) => out.push_str(&format!(",{v:.4}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
