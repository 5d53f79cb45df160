//! Smoothed BLEU-4 at sentence and corpus level.
//!
//! Zero n-gram matches are smoothed exponentially (each zero-count order
//! halves a running smoothing denominator), the brevity penalty is
//! `exp(1 - |ref|/|hyp|)` for short hypotheses, and sentence scoring uses the
//! effective order (n-gram orders the hypothesis is long enough to produce).
//! Scores are on the 0..100 scale.

use std::collections::HashMap;

const MAX_ORDER: usize = 4;

/// How to split text into BLEU tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BleuTokenizer {
    /// Case-preserving international tokenization: alphanumeric runs are
    /// tokens and every other non-whitespace character is its own token.
    Builtin,
    /// Split on whitespace only; use for input that is already tokenized
    /// (e.g. by an external subword tokenizer).
    Whitespace,
}

pub fn bleu_tokenize(text: &str, tokenizer: BleuTokenizer) -> Vec<String> {
    match tokenizer {
        BleuTokenizer::Whitespace => text.split_whitespace().map(str::to_string).collect(),
        BleuTokenizer::Builtin => {
            let mut tokens = Vec::new();
            let mut current = String::new();
            for ch in text.chars() {
                if ch.is_alphanumeric() {
                    current.push(ch);
                } else {
                    if !current.is_empty() {
                        tokens.push(std::mem::take(&mut current));
                    }
                    if !ch.is_whitespace() {
                        tokens.push(ch.to_string());
                    }
                }
            }
            if !current.is_empty() {
                tokens.push(current);
            }
            tokens
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    correct: [usize; MAX_ORDER],
    total: [usize; MAX_ORDER],
    sys_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.correct[n] += other.correct[n];
            self.total[n] += other.total[n];
        }
        self.sys_len += other.sys_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

fn pair_stats(hyp: &[String], reference: &[String]) -> BleuStats {
    let mut stats = BleuStats {
        sys_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        if hyp.len() < n {
            break;
        }
        let ref_counts = ngram_counts(reference, n);
        let hyp_counts = ngram_counts(hyp, n);
        stats.total[n - 1] = hyp.len() - n + 1;
        stats.correct[n - 1] = hyp_counts
            .iter()
            .map(|(gram, &cnt)| cnt.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
    }
    stats
}

/// Score pooled statistics. `effective_order` restricts the geometric mean to
/// the orders the hypothesis actually produced (sentence-level behavior).
fn score_from_stats(stats: &BleuStats, effective_order: bool) -> f64 {
    if stats.sys_len == 0 {
        return 0.0;
    }
    let mut precisions = [0.0f64; MAX_ORDER];
    let mut smooth = 1.0f64;
    let mut eff_order = MAX_ORDER;
    for n in 0..MAX_ORDER {
        if stats.total[n] == 0 {
            break;
        }
        if effective_order {
            eff_order = n + 1;
        }
        precisions[n] = if stats.correct[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * stats.total[n] as f64)
        } else {
            stats.correct[n] as f64 / stats.total[n] as f64
        };
    }
    let bp = if stats.sys_len < stats.ref_len {
        (1.0 - stats.ref_len as f64 / stats.sys_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    for &p in &precisions[..eff_order] {
        if p <= 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    100.0 * bp * (log_sum / eff_order as f64).exp()
}

/// Smoothed sentence BLEU in [0, 100] with the builtin tokenizer unless told
/// otherwise.
pub fn sentence_bleu(hyp: &str, reference: &str, tokenizer: BleuTokenizer) -> f64 {
    let stats = pair_stats(
        &bleu_tokenize(hyp, tokenizer),
        &bleu_tokenize(reference, tokenizer),
    );
    score_from_stats(&stats, true)
}

/// Corpus BLEU over aligned hypothesis/reference lists: pooled n-gram counts,
/// a single brevity penalty, all four orders.
pub fn corpus_bleu_with(
    hyps: &[impl AsRef<str>],
    refs: &[impl AsRef<str>],
    tokenizer: BleuTokenizer,
) -> Result<f64, super::EvalError> {
    if hyps.len() != refs.len() {
        return Err(super::EvalError::LengthMismatch { left: hyps.len(), right: refs.len() });
    }
    if hyps.is_empty() {
        return Err(super::EvalError::EmptyInput);
    }
    let mut stats = BleuStats::default();
    for (hyp, reference) in hyps.iter().zip(refs) {
        stats.add(&pair_stats(
            &bleu_tokenize(hyp.as_ref(), tokenizer),
            &bleu_tokenize(reference.as_ref(), tokenizer),
        ));
    }
    Ok(score_from_stats(&stats, false))
}

/// [`corpus_bleu_with`] using the builtin tokenizer.
pub fn corpus_bleu(
    hyps: &[impl AsRef<str>],
    refs: &[impl AsRef<str>],
) -> Result<f64, super::EvalError> {
    corpus_bleu_with(hyps, refs, BleuTokenizer::Builtin)
}
