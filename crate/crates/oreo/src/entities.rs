//! Entity and event extraction for the consistency filter.
//!
//! The default extractor is purely lexical and deterministic: maximal runs
//! of capitalized words (with a sentence-initial stopword trimmed off the
//! front of a run), plus standalone number tokens, which stand in for dates
//! and years. Items are casefolded with collapsed whitespace and compared
//! with set semantics. The trait admits an NER model as a drop-in.

use std::collections::BTreeSet;

/// Normalized entity/event surface strings.
pub type EntityEventSet = BTreeSet<String>;

pub trait EntityExtractor {
    fn extract(&self, text: &str) -> EntityEventSet;
}

const SENTENCE_INITIAL_STOPWORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "it", "its", "he", "she", "they", "we",
    "i", "you", "in", "on", "at", "by", "for", "with", "from", "to", "of", "as", "is", "are",
    "was", "were", "be", "been", "being", "and", "or", "but", "if", "then", "there", "here",
    "what", "which", "who", "whom", "whose", "where", "when", "why", "how", "both", "after",
    "before", "during", "since", "so", "not", "no", "all", "any", "some", "such",
];

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalExtractor;

struct Token {
    word: String,
    sentence_initial: bool,
}

fn tokenize_sentences(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut sentence_start = true;
    for raw in text.split_whitespace() {
        let word: String = raw
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_string();
        let ends_sentence = raw.ends_with(['.', '!', '?']);
        if !word.is_empty() {
            tokens.push(Token {
                word,
                sentence_initial: sentence_start,
            });
            sentence_start = ends_sentence;
        } else if ends_sentence {
            sentence_start = true;
        }
    }
    tokens
}

fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(|c| c.is_uppercase())
}

fn is_number(word: &str) -> bool {
    !word.is_empty() && word.chars().all(|c| c.is_ascii_digit())
}

fn normalize_item(words: &[&str]) -> String {
    words
        .iter()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl EntityExtractor for LexicalExtractor {
    fn extract(&self, text: &str) -> EntityEventSet {
        let tokens = tokenize_sentences(text);
        let mut items = EntityEventSet::new();
        let mut i = 0;
        while i < tokens.len() {
            if is_number(&tokens[i].word) {
                items.insert(tokens[i].word.clone());
                i += 1;
                continue;
            }
            if is_capitalized(&tokens[i].word) {
                let mut j = i;
                while j < tokens.len() && is_capitalized(&tokens[j].word) {
                    j += 1;
                }
                let mut start = i;
                // a capitalized sentence opener like "The" is casing, not
                // an entity mention
                if tokens[start].sentence_initial
                    && SENTENCE_INITIAL_STOPWORDS
                        .contains(&tokens[start].word.to_lowercase().as_str())
                {
                    start += 1;
                }
                if start < j {
                    let words: Vec<&str> =
                        tokens[start..j].iter().map(|t| t.word.as_str()).collect();
                    items.insert(normalize_item(&words));
                }
                i = j;
                continue;
            }
            i += 1;
        }
        items
    }
}
