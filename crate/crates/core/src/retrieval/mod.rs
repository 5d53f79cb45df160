//! The retriever suite: random sampling, embedding k-NN, BM25, coverage
//! re-ranked BM25, sentence-BLEU ranking, and Borda-count rank fusion.
//!
//! Every retriever returns exactly `k` distinct pool pairs with consecutive
//! ranks starting at 1, fully determined by (pool, config, seed). Indexes are
//! immutable after construction, so per-query retrieval is safe to run in
//! parallel.

pub mod bm25;

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Pool;
use crate::embedding::{dot_f64, EmbeddingError, EmbeddingMatrix};
use crate::evaluation::bleu::{sentence_bleu, BleuTokenizer};

pub use bm25::{tokenize, Bm25Index, Bm25Params};

/// Which retriever produced a ranked example.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Retriever {
    Random,
    /// Embedding k-NN, tagged with the embedding model name.
    Embedding(String),
    Bm25,
    Rbm25,
    Bleu,
    Borda,
}

impl Retriever {
    pub fn label(&self) -> String {
        match self {
            Retriever::Random => "random".into(),
            Retriever::Embedding(model) => format!("embedding:{model}"),
            Retriever::Bm25 => "bm25".into(),
            Retriever::Rbm25 => "rbm25".into(),
            Retriever::Bleu => "bleu".into(),
            Retriever::Borda => "borda".into(),
        }
    }
}

impl fmt::Display for Retriever {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for Retriever {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Retriever {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Ok(match raw.as_str() {
            "random" => Retriever::Random,
            "bm25" => Retriever::Bm25,
            "rbm25" => Retriever::Rbm25,
            "bleu" => Retriever::Bleu,
            "borda" => Retriever::Borda,
            other => match other.strip_prefix("embedding:") {
                Some(model) => Retriever::Embedding(model.to_string()),
                None => {
                    return Err(serde::de::Error::custom(format!(
                        "unknown retriever {other:?}"
                    )))
                }
            },
        })
    }
}

/// Which side of the pool pair the query was compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

/// Retrieval direction: compare the query to the source or the target side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SourceToSource,
    SourceToTarget,
}

impl Default for Direction {
    fn default() -> Self {
        Direction::SourceToSource
    }
}

impl Direction {
    pub fn side(self) -> Side {
        match self {
            Direction::SourceToSource => Side::Source,
            Direction::SourceToTarget => Side::Target,
        }
    }
}

/// One retrieved pool pair with score, 1-based rank, and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExample {
    pub pair_id: String,
    pub score: f64,
    pub rank: usize,
    pub retriever: Retriever,
    pub side_used: Side,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    #[serde(default)]
    pub direction: Direction,
    /// Seed for the random baseline; ignored by deterministic retrievers.
    #[serde(default)]
    pub seed: u64,
}

impl RetrievalConfig {
    pub fn new(k: usize) -> Self {
        RetrievalConfig { k, direction: Direction::SourceToSource, seed: 0 }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k={k} exceeds pool size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("no embedding for pool pair {0:?}")]
    MissingEmbedding(String),
    #[error("expected two lists of {expected} distinct examples, got {got}")]
    ListSizeMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

fn check_k(k: usize, n: usize) -> Result<(), RetrievalError> {
    if k > n {
        Err(RetrievalError::KTooLarge { k, n })
    } else {
        Ok(())
    }
}

fn side_text<'a>(pool: &'a Pool, idx: usize, side: Side) -> &'a str {
    match side {
        Side::Source => &pool.pairs()[idx].source_text,
        Side::Target => &pool.pairs()[idx].target_text,
    }
}

fn to_ranked(
    picks: impl IntoIterator<Item = (usize, f64)>,
    pool: &Pool,
    retriever: &Retriever,
    side: Side,
) -> Vec<RankedExample> {
    picks
        .into_iter()
        .enumerate()
        .map(|(i, (idx, score))| RankedExample {
            pair_id: pool.pairs()[idx].id.clone(),
            score,
            rank: i + 1,
            retriever: retriever.clone(),
            side_used: side,
        })
        .collect()
}

/// Uniform sample of `k` distinct pairs without replacement, fully determined
/// by the seed and pool order. Scores are 0.
pub fn retrieve_random(pool: &Pool, cfg: &RetrievalConfig) -> Result<Vec<RankedExample>, RetrievalError> {
    let n = pool.len();
    check_k(cfg.k, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..cfg.k {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    Ok(to_ranked(
        indices[..cfg.k].iter().map(|&idx| (idx, 0.0)),
        pool,
        &Retriever::Random,
        cfg.direction.side(),
    ))
}

/// Exact cosine k-NN of the query embedding against the pool-side embedding
/// matrix. Ties break toward the earlier pool position.
pub fn retrieve_embedding(
    query_embedding: &[f32],
    pool: &Pool,
    matrix_for_side: &EmbeddingMatrix,
    model: &str,
    cfg: &RetrievalConfig,
) -> Result<Vec<RankedExample>, RetrievalError> {
    check_k(cfg.k, pool.len())?;
    let mut scored = Vec::with_capacity(pool.len());
    for (idx, pair) in pool.pairs().iter().enumerate() {
        let row = matrix_for_side
            .row_for(&pair.id)
            .ok_or_else(|| RetrievalError::MissingEmbedding(pair.id.clone()))?;
        if row.len() != query_embedding.len() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: row.len(),
                got: query_embedding.len(),
            }
            .into());
        }
        scored.push((idx, dot_f64(query_embedding, row).clamp(-1.0, 1.0)));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(cfg.k);
    Ok(to_ranked(
        scored,
        pool,
        &Retriever::Embedding(model.to_string()),
        cfg.direction.side(),
    ))
}

/// Build a BM25 index over one side of the pool, in pool order.
pub fn build_bm25_index(pool: &Pool, side: Side, params: Bm25Params) -> Bm25Index {
    Bm25Index::from_texts(
        pool.pairs()
            .iter()
            .enumerate()
            .map(|(idx, pair)| (pair.id.clone(), side_text(pool, idx, side))),
        params,
    )
}

/// Top-k documents by BM25 score; ties break toward the smaller doc index.
pub fn retrieve_bm25(
    query_text: &str,
    index: &Bm25Index,
    cfg: &RetrievalConfig,
) -> Result<Vec<RankedExample>, RetrievalError> {
    check_k(cfg.k, index.len())?;
    let query_tokens = tokenize(query_text);
    let ranked = index.rank_all(&query_tokens);
    Ok(ranked
        .into_iter()
        .take(cfg.k)
        .enumerate()
        .map(|(i, (doc_idx, score))| RankedExample {
            pair_id: index.doc_ids()[doc_idx].clone(),
            score,
            rank: i + 1,
            retriever: Retriever::Bm25,
            side_used: cfg.direction.side(),
        })
        .collect())
}

/// Default candidate-list depth for coverage re-ranking.
pub const RBM25_CANDIDATES: usize = 100;
/// Default maximum n-gram order for coverage re-ranking.
pub const RBM25_NGRAM_ORDER: usize = 4;

/// Re-rank a BM25 candidate list by greedy query n-gram coverage and keep the
/// first `k`. `candidates` must be sorted by descending BM25 score (the
/// output of [`retrieve_bm25`]); that order is the tie-break. Output scores
/// are rank-derived (`k - rank + 1`): the selection criterion is coverage,
/// not a scalar.
pub fn rerank_rbm25(
    query_tokens: &[String],
    candidates: &[RankedExample],
    index: &Bm25Index,
    k: usize,
    n_max: usize,
) -> Result<Vec<RankedExample>, RetrievalError> {
    check_k(k, candidates.len())?;
    let candidate_tokens: Vec<&[String]> = candidates
        .iter()
        .map(|c| {
            index
                .position(&c.pair_id)
                .map(|idx| index.doc_tokens(idx))
                .ok_or_else(|| RetrievalError::MissingEmbedding(c.pair_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let order = bm25::greedy_coverage_order(query_tokens, &candidate_tokens, k, n_max);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, cand_pos)| RankedExample {
            pair_id: candidates[cand_pos].pair_id.clone(),
            score: (k - i) as f64,
            rank: i + 1,
            retriever: Retriever::Rbm25,
            side_used: candidates[cand_pos].side_used,
        })
        .collect())
}

/// Convenience pipeline: BM25 top candidates, then coverage re-ranking.
pub fn retrieve_rbm25(
    query_text: &str,
    index: &Bm25Index,
    cfg: &RetrievalConfig,
    candidates: usize,
    n_max: usize,
) -> Result<Vec<RankedExample>, RetrievalError> {
    check_k(cfg.k, index.len())?;
    let depth = candidates.min(index.len()).max(cfg.k);
    let candidate_cfg = RetrievalConfig { k: depth, ..cfg.clone() };
    let top = retrieve_bm25(query_text, index, &candidate_cfg)?;
    rerank_rbm25(&tokenize(query_text), &top, index, cfg.k, n_max)
}

/// Rank pool pairs by smoothed sentence BLEU of the pool-side text against
/// the query. Ties break toward the earlier pool position.
pub fn retrieve_bleu(
    query_text: &str,
    pool: &Pool,
    cfg: &RetrievalConfig,
) -> Result<Vec<RankedExample>, RetrievalError> {
    check_k(cfg.k, pool.len())?;
    let side = cfg.direction.side();
    let mut scored: Vec<(usize, f64)> = (0..pool.len())
        .map(|idx| {
            (
                idx,
                sentence_bleu(side_text(pool, idx, side), query_text, BleuTokenizer::Builtin),
            )
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(cfg.k);
    Ok(to_ranked(scored, pool, &Retriever::Bleu, side))
}

/// Borda-count fusion of an embedding top-k list and a BM25 top-k list.
///
/// Rank r in a list of size k earns `k - r + 1` points; an element present in
/// both lists earns one bonus point. The fused list is the top-k by points;
/// on equal points the embedding-list element wins, and within the same list
/// the better original rank wins.
pub fn borda_merge(
    list_embedding: &[RankedExample],
    list_bm25: &[RankedExample],
    k: usize,
) -> Result<Vec<RankedExample>, RetrievalError> {
    for list in [list_embedding, list_bm25] {
        let distinct: HashSet<&str> = list.iter().map(|r| r.pair_id.as_str()).collect();
        if list.len() != k || distinct.len() != k {
            return Err(RetrievalError::ListSizeMismatch { expected: k, got: list.len() });
        }
    }
    struct Entry {
        id: String,
        points: usize,
        emb_rank: Option<usize>,
        bm25_rank: Option<usize>,
        side: Side,
    }
    let mut entries: Vec<Entry> = Vec::with_capacity(2 * k);
    for r in list_embedding {
        entries.push(Entry {
            id: r.pair_id.clone(),
            points: k - r.rank + 1,
            emb_rank: Some(r.rank),
            bm25_rank: None,
            side: r.side_used,
        });
    }
    for r in list_bm25 {
        match entries.iter_mut().find(|e| e.id == r.pair_id) {
            Some(e) => {
                e.points += (k - r.rank + 1) + 1; // overlap bonus
                e.bm25_rank = Some(r.rank);
            }
            None => entries.push(Entry {
                id: r.pair_id.clone(),
                points: k - r.rank + 1,
                emb_rank: None,
                bm25_rank: Some(r.rank),
                side: r.side_used,
            }),
        }
    }
    entries.sort_by(|a, b| {
        b.points
            .cmp(&a.points)
            .then_with(|| b.emb_rank.is_some().cmp(&a.emb_rank.is_some()))
            .then_with(|| {
                let ra = a.emb_rank.unwrap_or_else(|| a.bm25_rank.expect("in one list"));
                let rb = b.emb_rank.unwrap_or_else(|| b.bm25_rank.expect("in one list"));
                ra.cmp(&rb)
            })
    });
    Ok(entries
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| RankedExample {
            pair_id: e.id,
            score: e.points as f64,
            rank: i + 1,
            retriever: Retriever::Borda,
            side_used: e.side,
        })
        .collect())
}

/// Number of pair ids two result lists share.
pub fn overlap(list_a: &[RankedExample], list_b: &[RankedExample]) -> usize {
    let ids: HashSet<&str> = list_a.iter().map(|r| r.pair_id.as_str()).collect();
    list_b.iter().filter(|r| ids.contains(r.pair_id.as_str())).count()
}

/// Mean over queries of the mean selection score within each query's list.
pub fn avg_similarity(all_selections: &[Vec<RankedExample>]) -> Result<f64, RetrievalError> {
    if all_selections.is_empty() || all_selections.iter().any(|s| s.is_empty()) {
        return Err(RetrievalError::EmptyInput);
    }
    let sum: f64 = all_selections
        .iter()
        .map(|sel| sel.iter().map(|r| r.score).sum::<f64>() / sel.len() as f64)
        .sum();
    Ok(sum / all_selections.len() as f64)
}

/// One query's exported selection, the JSONL interchange record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub query_id: String,
    pub retriever: Retriever,
    pub k: usize,
    pub selected: Vec<SelectedPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectedPair {
    pub pair_id: String,
    pub score: f64,
    pub rank: usize,
}

impl SelectionRecord {
    pub fn from_ranked(query_id: &str, ranked: &[RankedExample]) -> Self {
        SelectionRecord {
            query_id: query_id.to_string(),
            retriever: ranked
                .first()
                .map(|r| r.retriever.clone())
                .unwrap_or(Retriever::Random),
            k: ranked.len(),
            selected: ranked
                .iter()
                .map(|r| SelectedPair {
                    pair_id: r.pair_id.clone(),
                    score: r.score,
                    rank: r.rank,
                })
                .collect(),
        }
    }
}
