//! Character n-gram naive-Bayes language identification.
//!
//! A small multinomial classifier used as the fallback when no external
//! language-ID predictions are supplied. Probabilities are add-one smoothed;
//! classification is a deterministic argmax (ties resolve to the
//! lexicographically smaller language code).

use std::collections::HashMap;

use crate::corpus::LangCode;

use super::EvalError;

#[derive(Debug, Clone)]
pub struct LangIdModel {
    langs: Vec<LangCode>,
    log_priors: Vec<f64>,
    ngram_log_probs: Vec<HashMap<String, f64>>,
    unseen_log_probs: Vec<f64>,
    n_lo: usize,
    n_hi: usize,
}

fn char_ngrams(text: &str, n_lo: usize, n_hi: usize) -> Vec<String> {
    let normalized: String = text
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    let chars: Vec<char> = normalized.chars().collect();
    let mut grams = Vec::new();
    for n in n_lo..=n_hi {
        if chars.len() < n {
            break;
        }
        for window in chars.windows(n) {
            grams.push(window.iter().collect());
        }
    }
    grams
}

/// Train on labeled sentences. Requires at least two distinct languages with
/// at least one non-empty sentence each.
pub fn train_langid(
    labeled: &[(String, LangCode)],
    n_range: (usize, usize),
) -> Result<LangIdModel, EvalError> {
    let (n_lo, n_hi) = n_range;
    if n_lo == 0 || n_lo > n_hi {
        return Err(EvalError::InsufficientData(format!(
            "invalid n-gram range {n_lo}..={n_hi}"
        )));
    }
    let mut counts: HashMap<LangCode, (usize, HashMap<String, usize>)> = HashMap::new();
    for (text, lang) in labeled {
        if text.trim().is_empty() {
            continue;
        }
        let entry = counts.entry(lang.clone()).or_default();
        entry.0 += 1;
        for gram in char_ngrams(text, n_lo, n_hi) {
            *entry.1.entry(gram).or_insert(0) += 1;
        }
    }
    if counts.len() < 2 {
        return Err(EvalError::InsufficientData(format!(
            "need at least 2 languages with non-empty sentences, got {}",
            counts.len()
        )));
    }
    let vocab: std::collections::HashSet<&String> =
        counts.values().flat_map(|(_, grams)| grams.keys()).collect();
    let vocab_size = vocab.len() as f64;
    let total_sentences: usize = counts.values().map(|(n, _)| n).sum();

    let mut langs: Vec<LangCode> = counts.keys().cloned().collect();
    langs.sort_by(|a, b| a.as_str().cmp(b.as_str()));

    let mut log_priors = Vec::with_capacity(langs.len());
    let mut ngram_log_probs = Vec::with_capacity(langs.len());
    let mut unseen_log_probs = Vec::with_capacity(langs.len());
    for lang in &langs {
        let (n_sentences, grams) = &counts[lang];
        log_priors.push((*n_sentences as f64 / total_sentences as f64).ln());
        let total_grams: usize = grams.values().sum();
        let denom = total_grams as f64 + vocab_size;
        ngram_log_probs.push(
            grams
                .iter()
                .map(|(g, &c)| (g.clone(), ((c as f64 + 1.0) / denom).ln()))
                .collect(),
        );
        unseen_log_probs.push((1.0 / denom).ln());
    }
    Ok(LangIdModel { langs, log_priors, ngram_log_probs, unseen_log_probs, n_lo, n_hi })
}

impl LangIdModel {
    pub fn languages(&self) -> &[LangCode] {
        &self.langs
    }

    /// Argmax language for a non-empty text.
    pub fn classify(&self, text: &str) -> Result<LangCode, EvalError> {
        if text.trim().is_empty() {
            return Err(EvalError::EmptyText);
        }
        let grams = char_ngrams(text, self.n_lo, self.n_hi);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.langs.len() {
            let table = &self.ngram_log_probs[i];
            let unseen = self.unseen_log_probs[i];
            let score: f64 = self.log_priors[i]
                + grams
                    .iter()
                    .map(|g| table.get(g).copied().unwrap_or(unseen))
                    .sum::<f64>();
            // strictly-greater keeps the first (lexicographically smaller)
            // language on ties
            if best.map(|(_, s)| score > s).unwrap_or(true) {
                best = Some((i, score));
            }
        }
        Ok(self.langs[best.expect("at least two languages").0].clone())
    }
}
