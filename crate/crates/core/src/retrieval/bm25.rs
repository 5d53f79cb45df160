//! Okapi BM25 scoring and greedy n-gram-coverage re-ranking.

use std::collections::{HashMap, HashSet};

/// Lowercase Unicode tokenizer: alphanumeric runs are tokens, everything else
/// (whitespace, punctuation) is a boundary and is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, Copy)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

/// Inverted statistics over a tokenized document collection.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_tokens: Vec<Vec<String>>,
    doc_freq: HashMap<String, usize>,
    doc_lens: Vec<usize>,
    avgdl: f64,
    params: Bm25Params,
    by_id: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn build(docs: Vec<(String, Vec<String>)>, params: Bm25Params) -> Self {
        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_tokens = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (id, tokens) in docs {
            let mut tf: HashMap<String, usize> = HashMap::new();
            for tok in &tokens {
                *tf.entry(tok.clone()).or_insert(0) += 1;
            }
            for term in tf.keys() {
                *doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
            doc_lens.push(tokens.len());
            doc_ids.push(id);
            term_freqs.push(tf);
            doc_tokens.push(tokens);
        }
        let avgdl = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        let by_id = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Bm25Index { doc_ids, term_freqs, doc_tokens, doc_freq, doc_lens, avgdl, params, by_id }
    }

    /// Build from raw texts using the module tokenizer.
    pub fn from_texts<'a, I>(texts: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = (String, &'a str)>,
    {
        Self::build(
            texts.into_iter().map(|(id, t)| (id, tokenize(t))).collect(),
            params,
        )
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_tokens(&self, idx: usize) -> &[String] {
        &self.doc_tokens[idx]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Non-negative idf: `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of one document against a token query. Repeated query
    /// tokens contribute once per occurrence.
    pub fn score(&self, query_tokens: &[String], doc_index: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let dl = self.doc_lens[doc_index] as f64;
        let norm = if self.avgdl > 0.0 {
            1.0 - b + b * dl / self.avgdl
        } else {
            1.0
        };
        let tf_map = &self.term_freqs[doc_index];
        query_tokens
            .iter()
            .map(|term| {
                let tf = tf_map.get(term).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                self.idf(term) * tf * (k1 + 1.0) / (tf + k1 * norm)
            })
            .sum()
    }

    /// Score every document; returns (doc_index, score) ranked by descending
    /// score with ties broken toward the smaller document index.
    pub fn rank_all(&self, query_tokens: &[String]) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, self.score(query_tokens, i)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored
    }
}

/// Distinct n-grams of orders `1..=n_max` in a token sequence.
pub(crate) fn ngram_set(tokens: &[String], n_max: usize) -> HashSet<Vec<String>> {
    let mut set = HashSet::new();
    for n in 1..=n_max {
        if tokens.len() < n {
            break;
        }
        for window in tokens.windows(n) {
            set.insert(window.to_vec());
        }
    }
    set
}

/// Greedy coverage re-ranking over BM25 candidates.
///
/// Maintains the set of query n-grams not yet covered by picked candidates and
/// repeatedly selects the candidate covering the most of them. Ties keep the
/// incoming candidate order (BM25 score, then document index). When every
/// query n-gram is covered the set resets to the full query n-gram set.
/// Returns positions into `candidates` in pick order.
pub fn greedy_coverage_order(
    query_tokens: &[String],
    candidate_tokens: &[&[String]],
    k: usize,
    n_max: usize,
) -> Vec<usize> {
    let full: HashSet<Vec<String>> = ngram_set(query_tokens, n_max);
    let cand_ngrams: Vec<HashSet<Vec<String>>> = candidate_tokens
        .iter()
        .map(|toks| ngram_set(toks, n_max))
        .collect();
    let mut uncovered = full.clone();
    let mut remaining: Vec<usize> = (0..candidate_tokens.len()).collect();
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let best_pos = remaining
            .iter()
            .enumerate()
            .map(|(pos, &cand)| (pos, cand_ngrams[cand].intersection(&uncovered).count()))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(pos, _)| pos)
            .expect("k <= candidate count");
        let cand = remaining.remove(best_pos);
        for g in &cand_ngrams[cand] {
            uncovered.remove(g);
        }
        if uncovered.is_empty() {
            uncovered = full.clone();
        }
        picked.push(cand);
    }
    picked
}
