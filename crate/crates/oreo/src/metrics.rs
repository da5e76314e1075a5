//! Answer metrics: exact match, unigram F1 and ROUGE-L, plus the text
//! normalization they share with answer-containment checks elsewhere.
//!
//! Two normalizers exist on purpose. [`normalize`] is the strict form used
//! by exact match and answer containment: casefold, strip punctuation, drop
//! the articles a/an/the, collapse whitespace. Token-overlap metrics
//! ([`unigram_f1`], [`rouge_l`]) tokenize with [`overlap_tokens`], which
//! keeps articles: "the cat sat" scored against "cat sat down" has exactly
//! two of three tokens in common on both sides (F1 = 2/3), and dropping
//! "the" would silently change that.

use std::collections::HashMap;

/// Strict normalization for exact match and answer containment:
/// casefold, strip punctuation, remove articles {a, an, the}, collapse
/// whitespace.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tokenization for overlap metrics: casefold, strip punctuation, split on
/// whitespace. Articles are kept.
pub fn overlap_tokens(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    no_punct.split_whitespace().map(str::to_string).collect()
}

/// 1 iff the normalized prediction equals the normalization of any gold.
pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let pred = normalize(prediction);
    golds.iter().any(|g| normalize(g) == pred) as u8
}

/// Does `haystack` contain `needle` as a substring after normalization?
///
/// Word-boundary containment on the normalized token stream, so "cat" is
/// found in "the cat sat" but not inside "catalog".
pub fn contains_answer(haystack: &str, needle: &str) -> bool {
    let hay: Vec<String> = normalize(haystack).split(' ').map(str::to_string).collect();
    let needle: Vec<String> = normalize(needle).split(' ').map(str::to_string).collect();
    if needle.is_empty() || needle[0].is_empty() {
        return false;
    }
    if needle.len() > hay.len() {
        return false;
    }
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

fn token_counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Token-multiset F1 between one prediction and one reference.
fn f1_single(prediction: &str, gold: &str) -> f64 {
    let pred = overlap_tokens(prediction);
    let gold = overlap_tokens(gold);
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let pred_counts = token_counts(&pred);
    let gold_counts = token_counts(&gold);
    let common: usize = pred_counts
        .iter()
        .map(|(tok, &c)| c.min(*gold_counts.get(tok).unwrap_or(&0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max over golds of the token-multiset F1 against the prediction.
pub fn unigram_f1(prediction: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| f1_single(prediction, g))
        .fold(0.0, f64::max)
}

/// Length of the longest common subsequence of two token slices.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure: LCS-based precision/recall over [`overlap_tokens`].
///
/// Shared by candidate ranking in the contrastive stage and reward scoring
/// in the alignment stage.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = overlap_tokens(candidate);
    let refr = overlap_tokens(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refr) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / cand.len() as f64;
    let recall = lcs / refr.len() as f64;
    2.0 * precision * recall / (precision + recall)
}
