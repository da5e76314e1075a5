//! Trainable subword vocabulary (byte-pair encoding over word characters).
//!
//! The vocabulary is learned from the working corpus: words are lowercased
//! character sequences closed by an end-of-word marker, and the most
//! frequent adjacent symbol pairs are merged until the target size is
//! reached. Ties are broken lexicographically so training is deterministic.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"];
const END_OF_WORD: &str = "</w>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
    #[serde(skip)]
    merge_rank: HashMap<(String, String), usize>,
}

/// Split text into lowercase word units: alphanumeric runs, or single
/// punctuation characters.
fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() {
            current.push(c);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                words.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    symbols.push(END_OF_WORD.to_string());
    symbols
}

impl Vocab {
    /// Learn a vocabulary of at most `target_size` entries from the texts.
    pub fn train(texts: &[String], target_size: usize) -> Self {
        let mut word_freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in pre_tokenize(text) {
                *word_freq.entry(word).or_insert(0) += 1;
            }
        }
        // working symbol sequences per distinct word
        let mut words: Vec<(Vec<String>, usize)> = {
            let mut items: Vec<(&String, &usize)> = word_freq.iter().collect();
            items.sort();
            items
                .into_iter()
                .map(|(w, &f)| (word_symbols(w), f))
                .collect()
        };

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.push(END_OF_WORD.to_string());
        let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
        let mut chars: Vec<String> = words
            .iter()
            .flat_map(|(syms, _)| syms.iter().cloned())
            .filter(|s| !seen.contains_key(s))
            .collect();
        chars.sort();
        chars.dedup();
        for c in chars {
            seen.insert(c.clone(), ());
            tokens.push(c);
        }

        let mut merges = Vec::new();
        while tokens.len() < target_size {
            let mut pair_counts: HashMap<(String, String), usize> = HashMap::new();
            for (syms, freq) in &words {
                for pair in syms.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += freq;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|(_, count)| *count >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((left, right), _)) = best else {
                break;
            };
            let merged = format!("{left}{right}");
            for (syms, _) in &mut words {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == left && syms[i + 1] == right {
                        syms[i] = merged.clone();
                        syms.remove(i + 1);
                    } else {
                        i += 1;
                    }
                }
            }
            if !seen.contains_key(&merged) {
                seen.insert(merged.clone(), ());
                tokens.push(merged.clone());
            }
            merges.push((left, right));
        }

        let mut vocab = Vocab {
            tokens,
            merges,
            token_to_id: HashMap::new(),
            merge_rank: HashMap::new(),
        };
        vocab.rebuild_lookup();
        vocab
    }

    fn rebuild_lookup(&mut self) {
        self.token_to_id = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self.merge_rank = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut syms = word_symbols(word);
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..syms.len().saturating_sub(1) {
                let key = (syms[i].clone(), syms[i + 1].clone());
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms[i] = merged;
            syms.remove(i + 1);
        }
        syms.iter()
            .map(|s| self.token_to_id.get(s).copied().unwrap_or(UNK))
            .collect()
    }

    /// Encode text into subword ids. No BOS/EOS framing is added here.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text)
            .iter()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    /// Decode ids back to text. Special tokens are dropped; words are joined
    /// with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < SPECIALS.len() as u32 {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                out.push_str(stem);
                out.push(' ');
            } else {
                out.push_str(tok);
            }
        }
        out.trim_end().to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Model(format!("vocab serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab: Vocab =
            serde_json::from_str(&json).map_err(|e| Error::Model(format!("vocab parse: {e}")))?;
        vocab.rebuild_lookup();
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<String> {
        vec![
            "The cat sat on the mat.".to_string(),
            "A cat, and a dog sat together in 1922.".to_string(),
            "Dogs and cats are friends.".to_string(),
        ]
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::train(&corpus(), 64);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(BOS), Some("<s>"));
        assert_eq!(v.token(EOS), Some("</s>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.token(SEP), Some("<sep>"));
    }

    #[test]
    fn encode_decode_round_trip_on_seen_text() {
        let v = Vocab::train(&corpus(), 128);
        let ids = v.encode("the cat sat on the mat");
        assert!(!ids.is_empty());
        assert!(ids.iter().all(|&id| id != UNK));
        assert_eq!(v.decode(&ids), "the cat sat on the mat");
    }

    #[test]
    fn punctuation_becomes_standalone_tokens() {
        let v = Vocab::train(&corpus(), 128);
        let ids = v.encode("cat, dog.");
        assert_eq!(v.decode(&ids), "cat , dog .");
    }

    #[test]
    fn unseen_character_maps_to_unk() {
        let v = Vocab::train(&corpus(), 64);
        let ids = v.encode("cat ∞");
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn respects_target_size() {
        let v = Vocab::train(&corpus(), 40);
        assert!(v.size() <= 40, "vocab size {}", v.size());
    }

    #[test]
    fn training_is_deterministic() {
        let a = Vocab::train(&corpus(), 96);
        let b = Vocab::train(&corpus(), 96);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn save_load_preserves_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocab::train(&corpus(), 96);
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        let text = "cats and dogs sat on the mat in 1922";
        assert_eq!(v.encode(text), loaded.encode(text));
    }

    #[test]
    fn merges_produce_multi_char_tokens() {
        let texts: Vec<String> = (0..30).map(|_| "reconstruction of retrieval context".to_string()).collect();
        let v = Vocab::train(&texts, 200);
        let ids = v.encode("reconstruction");
        // frequent words should compress well below character length
        assert!(ids.len() < "reconstruction".len());
    }
}
