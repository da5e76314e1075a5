//! Chunked corpus storage, Okapi BM25 indexing and top-k retrieval.
//!
//! Retrieval tokenization is deliberately plain: lowercase, split on
//! non-alphanumerics, no stemming. Scores use the Okapi BM25 formula with
//! k1 = 1.2, b = 0.75 and IDF = ln(1 + (N - df + 0.5) / (df + 0.5)), which
//! keeps every term contribution non-negative. Ties are broken by ascending
//! chunk id so results are deterministic and independent of ingestion order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{contains_answer, overlap_tokens};
use crate::{jsonl, Error, Result};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// One pre-chunked corpus unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub id: String,
    pub title: String,
    pub text: String,
    /// Length of `text` under the pipeline's subword tokenizer, cached at
    /// ingestion time.
    #[serde(default)]
    pub token_count: usize,
}

/// Raw corpus record as found in a corpus file (token counts not yet known).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalEntry {
    pub chunk_id: String,
    /// 1-based rank.
    pub rank: usize,
    pub score: f64,
    pub text: String,
}

/// Ranked top-k result for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub entries: Vec<RetrievalEntry>,
    /// Set when the query tokenized to nothing and no search was run.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_query: bool,
}

/// Immutable chunk store with id lookup.
#[derive(Debug, Clone)]
pub struct ChunkStore {
    chunks: Vec<DocumentChunk>,
    by_id: HashMap<String, usize>,
}

impl ChunkStore {
    /// Ingest records, rejecting duplicate ids and empty texts. Token counts
    /// are computed once through `count_tokens` and cached on each chunk.
    pub fn ingest<F>(records: Vec<CorpusRecord>, mut count_tokens: F) -> Result<Self>
    where
        F: FnMut(&str) -> usize,
    {
        let mut chunks = Vec::with_capacity(records.len());
        let mut by_id = HashMap::with_capacity(records.len());
        for rec in records {
            if rec.text.trim().is_empty() {
                return Err(Error::Corpus(format!("chunk {:?} has empty text", rec.id)));
            }
            if by_id.contains_key(&rec.id) {
                return Err(Error::Corpus(format!("duplicate chunk id {:?}", rec.id)));
            }
            let token_count = count_tokens(&rec.text);
            by_id.insert(rec.id.clone(), chunks.len());
            chunks.push(DocumentChunk {
                id: rec.id,
                title: rec.title,
                text: rec.text,
                token_count,
            });
        }
        Ok(Self { chunks, by_id })
    }

    /// Rebuild a store from previously ingested chunks (token counts kept).
    pub fn from_chunks(chunks: Vec<DocumentChunk>) -> Result<Self> {
        let records = chunks
            .iter()
            .map(|c| CorpusRecord {
                id: c.id.clone(),
                title: c.title.clone(),
                text: c.text.clone(),
            })
            .collect();
        let counts: HashMap<String, usize> = chunks
            .iter()
            .map(|c| (c.id.clone(), c.token_count))
            .collect();
        Self::ingest(records, |_| 0).map(|mut store| {
            for chunk in &mut store.chunks {
                chunk.token_count = counts[&chunk.id];
            }
            store
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DocumentChunk> {
        self.by_id.get(id).map(|&i| &self.chunks[i])
    }

    pub fn chunks(&self) -> &[DocumentChunk] {
        &self.chunks
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_chunks(jsonl::read_all(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_all(path, &self.chunks)
    }
}

/// Per-corpus statistics needed by the BM25 formula.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub avgdl: f64,
    /// Document frequency per term.
    pub df: BTreeMap<String, usize>,
}

/// Okapi BM25 index over a [`ChunkStore`].
///
/// The index is built once and is immutable afterwards; queries only read.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    stats: CorpusStats,
    /// Term frequency per chunk, aligned with the store's chunk order.
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
}

/// Retrieval tokenization: lowercase, split on non-alphanumerics.
pub fn tokenize(text: &str) -> Vec<String> {
    overlap_tokens(text)
}

impl Bm25Index {
    pub fn build(store: &ChunkStore) -> Self {
        let mut term_freqs = Vec::with_capacity(store.len());
        let mut doc_lens = Vec::with_capacity(store.len());
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for chunk in store.chunks() {
            let tokens = tokenize(&chunk.text);
            doc_lens.push(tokens.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for tok in tokens {
                *tf.entry(tok).or_insert(0) += 1;
            }
            for term in tf.keys() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
            term_freqs.push(tf);
        }
        let total_len: usize = doc_lens.iter().sum();
        let avgdl = if doc_lens.is_empty() {
            0.0
        } else {
            total_len as f64 / doc_lens.len() as f64
        };
        Self {
            stats: CorpusStats {
                n_docs: store.len(),
                avgdl,
                df,
            },
            term_freqs,
            doc_lens,
        }
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.stats.n_docs as f64;
        let df = self.stats.df.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of one chunk (by store index) against the query terms.
    /// Repeated query terms contribute once per occurrence.
    pub fn score_chunk(&self, query_terms: &[String], chunk_idx: usize) -> f64 {
        let tf_map = &self.term_freqs[chunk_idx];
        let dl = self.doc_lens[chunk_idx] as f64;
        let avgdl = self.stats.avgdl.max(f64::MIN_POSITIVE);
        let mut score = 0.0;
        for term in query_terms {
            let tf = tf_map.get(term).copied().unwrap_or(0) as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = self.idf(term);
            let tf_norm = (tf * (BM25_K1 + 1.0)) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl));
            score += idf * tf_norm;
        }
        score
    }

    /// Top-k chunks for a query, scores descending, ties broken by ascending
    /// chunk id. Zero-score chunks participate so `k = corpus size` returns
    /// the whole corpus.
    pub fn retrieve_topk(&self, store: &ChunkStore, query_id: &str, query: &str, k: usize) -> Result<RetrievalResult> {
        if k == 0 || k > store.len() {
            return Err(Error::Corpus(format!(
                "k = {k} out of range for corpus of {} chunks",
                store.len()
            )));
        }
        let terms = tokenize(query);
        if terms.is_empty() {
            return Ok(RetrievalResult {
                query_id: query_id.to_string(),
                entries: Vec::new(),
                empty_query: true,
            });
        }
        let mut scored: Vec<(usize, f64)> = (0..store.len())
            .map(|i| (i, self.score_chunk(&terms, i)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| store.chunks()[a.0].id.cmp(&store.chunks()[b.0].id))
        });
        let entries = scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, (idx, score))| RetrievalEntry {
                chunk_id: store.chunks()[idx].id.clone(),
                rank: rank + 1,
                score,
                text: store.chunks()[idx].text.clone(),
            })
            .collect();
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            entries,
            empty_query: false,
        })
    }
}

/// Mean over queries of (answer-containing chunks among the top k) / k.
///
/// Results with fewer than k entries count the missing slots as misses.
/// Containment uses the strict exact-match normalization.
pub fn precision_at_k(
    results: &[RetrievalResult],
    answers: &HashMap<String, Vec<String>>,
    k: usize,
) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Eval("precision_at_k over empty result list".into()));
    }
    if k == 0 {
        return Err(Error::Eval("precision_at_k with k = 0".into()));
    }
    let mut total = 0.0;
    for result in results {
        let golds = answers.get(&result.query_id).cloned().unwrap_or_default();
        let hits = result
            .entries
            .iter()
            .take(k)
            .filter(|e| golds.iter().any(|a| contains_answer(&e.text, a)))
            .count();
        total += hits as f64 / k as f64;
    }
    Ok(total / results.len() as f64)
}
