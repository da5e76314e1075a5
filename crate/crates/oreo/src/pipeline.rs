//! Retrieve-reconstruct-generate execution with selectable context mode.
//!
//! Modes mirror the standard comparison grid: question only, full
//! concatenation of the retrieved chunks, best-ranked passage filtering,
//! and the trained reconstructor. Changing the mode never changes what was
//! retrieved; it only changes what the generator gets to see.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clients::GeneratorClient;
use crate::model::{DecodeParams, SeqModel};
use crate::retrieval::{Bm25Index, ChunkStore, DocumentChunk, RetrievalResult};
use crate::sft::{self, SftConfig};
use crate::tokenizer::Vocab;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    NoRetrieval,
    FullContent,
    PassageFilter,
    Oreo,
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ContextMode::NoRetrieval => "no_retrieval",
            ContextMode::FullContent => "full_content",
            ContextMode::PassageFilter => "passage_filter",
            ContextMode::Oreo => "oreo",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_retrieval" => Ok(ContextMode::NoRetrieval),
            "full_content" => Ok(ContextMode::FullContent),
            "passage_filter" => Ok(ContextMode::PassageFilter),
            "oreo" => Ok(ContextMode::Oreo),
            other => Err(Error::Config(format!(
                "unknown context mode {other:?}; expected no_retrieval, full_content, \
                 passage_filter or oreo"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopType {
    Single,
    Multi,
}

/// One query record from the queries file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct WallTimes {
    pub retrieve: f64,
    pub reconstruct: f64,
    pub generate: f64,
}

/// One pipeline execution record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRun {
    pub query_id: String,
    pub mode: ContextMode,
    pub context_text: String,
    /// Measured with the pipeline's own subword tokenizer, uniformly across
    /// modes.
    pub context_token_count: usize,
    pub answer: String,
    pub wall_times: WallTimes,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reconstruct_fell_back: bool,
}

/// Marker line placed before each chunk in concatenated contexts.
pub fn chunk_marker(title: &str) -> String {
    format!("--- {title} ---")
}

/// Mode-specific context assembly for the non-reconstructive modes.
pub fn build_context(chunks: &[&DocumentChunk], mode: ContextMode, hop_type: HopType) -> String {
    match mode {
        ContextMode::NoRetrieval => String::new(),
        ContextMode::FullContent => chunks
            .iter()
            .map(|c| format!("{}\n{}", chunk_marker(&c.title), c.text))
            .collect::<Vec<_>>()
            .join("\n"),
        ContextMode::PassageFilter => {
            let take = match hop_type {
                HopType::Single => 1,
                HopType::Multi => 2,
            };
            chunks
                .iter()
                .take(take)
                .map(|c| c.text.clone())
                .collect::<Vec<_>>()
                .join("\n")
        }
        ContextMode::Oreo => unreachable!("reconstruction handles the oreo mode"),
    }
}

/// Generate a reconstructed context. Decode failures fall back to the
/// passage-filter context; the flag reports that the fallback fired.
pub fn reconstruct(
    question: &str,
    chunks: &[&DocumentChunk],
    model: &SeqModel,
    decode: &DecodeParams,
    assembly: &SftConfig,
    hop_type: HopType,
) -> (String, bool) {
    let chunk_texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let attempt = sft::assemble_input(
        &model.vocab,
        &assembly.instruction,
        question,
        &chunk_texts,
        assembly.max_input_len,
    )
    .and_then(|input| model.generate(&input, decode))
    .and_then(|outputs| {
        let text = model.vocab.decode(&outputs[0].ids);
        if text.trim().is_empty() {
            Err(Error::Model("empty reconstruction".into()))
        } else {
            Ok(text)
        }
    });
    match attempt {
        Ok(text) => (text, false),
        Err(_) => (build_context(chunks, ContextMode::PassageFilter, hop_type), true),
    }
}

/// Everything a pipeline run needs. The retriever index is read-only and
/// shared; the model is only required for the reconstructive mode.
pub struct PipelineComponents<'a> {
    pub store: &'a ChunkStore,
    pub index: &'a Bm25Index,
    pub vocab: &'a Vocab,
    pub model: Option<&'a SeqModel>,
    pub generator: &'a dyn GeneratorClient,
    pub decode: DecodeParams,
    pub assembly: SftConfig,
    pub k: usize,
    pub hop_type: HopType,
}

impl<'a> PipelineComponents<'a> {
    fn chunks_for<'b>(&'b self, result: &RetrievalResult) -> Vec<&'b DocumentChunk> {
        result
            .entries
            .iter()
            .filter_map(|e| self.store.get(&e.chunk_id))
            .collect()
    }
}

/// Run one query through retrieve, context assembly and generation.
pub fn run_query(
    query: &Query,
    mode: ContextMode,
    components: &PipelineComponents,
) -> Result<PipelineRun> {
    let retrieve_start = Instant::now();
    let retrieved = components.index.retrieve_topk(
        components.store,
        &query.id,
        &query.question,
        components.k,
    )?;
    let chunks = components.chunks_for(&retrieved);
    let retrieve_secs = retrieve_start.elapsed().as_secs_f64();

    let reconstruct_start = Instant::now();
    let mut fell_back = false;
    let context_text = match mode {
        ContextMode::Oreo => {
            let model = components.model.ok_or_else(|| {
                Error::Config("the oreo mode needs a trained checkpoint".into())
            })?;
            let (text, fb) = reconstruct(
                &query.question,
                &chunks,
                model,
                &components.decode,
                &components.assembly,
                components.hop_type,
            );
            fell_back = fb;
            text
        }
        other => build_context(&chunks, other, components.hop_type),
    };
    let reconstruct_secs = reconstruct_start.elapsed().as_secs_f64();

    let generate_start = Instant::now();
    let answer = components.generator.answer(&query.question, &context_text)?;
    let generate_secs = generate_start.elapsed().as_secs_f64();

    Ok(PipelineRun {
        query_id: query.id.clone(),
        mode,
        context_token_count: components.vocab.count_tokens(&context_text),
        context_text,
        answer,
        wall_times: WallTimes {
            retrieve: retrieve_secs,
            reconstruct: reconstruct_secs,
            generate: generate_secs,
        },
        failed: false,
        error: None,
        reconstruct_fell_back: fell_back,
    })
}

/// Run every query; per-query failures become failed records and the run
/// continues.
pub fn run_pipeline(
    queries: &[Query],
    mode: ContextMode,
    components: &PipelineComponents,
) -> Vec<PipelineRun> {
    queries
        .iter()
        .map(|query| {
            run_query(query, mode, components).unwrap_or_else(|e| PipelineRun {
                query_id: query.id.clone(),
                mode,
                context_text: String::new(),
                context_token_count: 0,
                answer: String::new(),
                wall_times: WallTimes::default(),
                failed: true,
                error: Some(e.to_string()),
                reconstruct_fell_back: false,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::ExtractiveGenerator;
    use crate::model::ModelConfig;
    use crate::retrieval::CorpusRecord;

    fn fixture_store() -> (ChunkStore, Bm25Index, Vocab) {
        let records = vec![
            CorpusRecord {
                id: "c1".into(),
                title: "Alice".into(),
                text: "alice was born in paris in 1901. alice liked maps.".into(),
            },
            CorpusRecord {
                id: "c2".into(),
                title: "Bruno".into(),
                text: "bruno was born in rome in 1902. bruno moved away.".into(),
            },
            CorpusRecord {
                id: "c3".into(),
                title: "Chloe".into(),
                text: "chloe was born in oslo in 1903. chloe sailed boats.".into(),
            },
        ];
        let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
        let vocab = Vocab::train(&texts, 160);
        let store = ChunkStore::ingest(records, |t| vocab.count_tokens(t)).unwrap();
        let index = Bm25Index::build(&store);
        (store, index, vocab)
    }

    fn toy_model(vocab: &Vocab) -> SeqModel {
        SeqModel::new(ModelConfig::toy(vocab.size(), 61), vocab.clone()).unwrap()
    }

    fn components<'a>(
        store: &'a ChunkStore,
        index: &'a Bm25Index,
        vocab: &'a Vocab,
        model: Option<&'a SeqModel>,
        generator: &'a dyn GeneratorClient,
    ) -> PipelineComponents<'a> {
        PipelineComponents {
            store,
            index,
            vocab,
            model,
            generator,
            decode: DecodeParams {
                max_tokens: 8,
                min_tokens: 1,
                ..DecodeParams::default()
            },
            assembly: SftConfig {
                max_input_len: 96,
                instruction: "alice".into(),
                ..SftConfig::default()
            },
            k: 3,
            hop_type: HopType::Single,
        }
    }

    fn alice_query() -> Query {
        Query {
            id: "q1".into(),
            question: "where was alice born".into(),
            answers: vec!["paris".into()],
        }
    }

    fn extractive(queries: &[Query]) -> ExtractiveGenerator {
        ExtractiveGenerator::new(
            queries
                .iter()
                .map(|q| (q.question.clone(), q.answers.clone())),
        )
    }

    #[test]
    fn no_retrieval_has_empty_context() {
        let (store, index, vocab) = fixture_store();
        let queries = vec![alice_query()];
        let gen = extractive(&queries);
        let comps = components(&store, &index, &vocab, None, &gen);
        let run = run_query(&queries[0], ContextMode::NoRetrieval, &comps).unwrap();
        assert_eq!(run.context_text, "");
        assert_eq!(run.context_token_count, 0);
    }

    #[test]
    fn passage_filter_takes_rank_one_exactly() {
        let (store, index, vocab) = fixture_store();
        let queries = vec![alice_query()];
        let gen = extractive(&queries);
        let comps = components(&store, &index, &vocab, None, &gen);
        let run = run_query(&queries[0], ContextMode::PassageFilter, &comps).unwrap();
        assert_eq!(run.context_text, store.get("c1").unwrap().text);
        // the extractive generator finds the planted answer
        assert_eq!(run.answer, "paris");
    }

    #[test]
    fn multi_hop_passage_filter_takes_two() {
        let (store, _, _) = fixture_store();
        let chunks: Vec<&DocumentChunk> = ["c1", "c2", "c3"]
            .iter()
            .map(|id| store.get(id).unwrap())
            .collect();
        let ctx = build_context(&chunks, ContextMode::PassageFilter, HopType::Multi);
        assert!(ctx.contains("alice was born"));
        assert!(ctx.contains("bruno was born"));
        assert!(!ctx.contains("chloe was born"));
    }

    #[test]
    fn full_content_length_is_sum_of_parts_plus_separators() {
        let (store, _, _) = fixture_store();
        let chunks: Vec<&DocumentChunk> = ["c1", "c2", "c3"]
            .iter()
            .map(|id| store.get(id).unwrap())
            .collect();
        let ctx = build_context(&chunks, ContextMode::FullContent, HopType::Single);
        let expected_len: usize = chunks
            .iter()
            .map(|c| chunk_marker(&c.title).len() + 1 + c.text.len())
            .sum::<usize>()
            + (chunks.len() - 1);
        assert_eq!(ctx.len(), expected_len);
    }

    #[test]
    fn mode_change_never_alters_retrieval() {
        let (store, index, vocab) = fixture_store();
        let queries = vec![alice_query()];
        let gen = extractive(&queries);
        let comps = components(&store, &index, &vocab, None, &gen);
        let r1 = index.retrieve_topk(&store, "q1", &queries[0].question, 3).unwrap();
        for mode in [ContextMode::NoRetrieval, ContextMode::FullContent, ContextMode::PassageFilter] {
            let _ = run_query(&queries[0], mode, &comps).unwrap();
            let r2 = index.retrieve_topk(&store, "q1", &queries[0].question, 3).unwrap();
            assert_eq!(r1.entries, r2.entries);
        }
    }

    #[test]
    fn oreo_mode_respects_token_bounds_and_is_deterministic() {
        let (store, index, vocab) = fixture_store();
        let model = toy_model(&vocab);
        let queries = vec![alice_query()];
        let gen = extractive(&queries);
        let mut comps = components(&store, &index, &vocab, Some(&model), &gen);
        comps.decode.max_tokens = 6;
        comps.decode.min_tokens = 6;
        let a = run_query(&queries[0], ContextMode::Oreo, &comps).unwrap();
        let b = run_query(&queries[0], ContextMode::Oreo, &comps).unwrap();
        assert_eq!(a.context_text, b.context_text);
        // the untrained model emits word fragments whose decoded text can
        // re-tokenize longer than the generation budget; the count must
        // still be in the same ballpark (the trained-model integration test
        // checks the tight bound)
        assert!(
            a.context_token_count <= 4 * 6 + 4,
            "token count {} far exceeds budget",
            a.context_token_count
        );
        assert!(!a.context_text.trim().is_empty());
        // never echoes the whole concatenation
        let full = build_context(
            &comps.chunks_for(&index.retrieve_topk(&store, "q1", &queries[0].question, 3).unwrap()),
            ContextMode::FullContent,
            HopType::Single,
        );
        assert_ne!(a.context_text, full);
    }

    #[test]
    fn oreo_without_model_fails_per_query_but_run_continues() {
        let (store, index, vocab) = fixture_store();
        let queries = vec![alice_query(), alice_query()];
        let gen = extractive(&queries);
        let comps = components(&store, &index, &vocab, None, &gen);
        let runs = run_pipeline(&queries, ContextMode::Oreo, &comps);
        assert_eq!(runs.len(), 2);
        assert!(runs.iter().all(|r| r.failed));
        assert!(runs[0].error.as_deref().unwrap().contains("checkpoint"));
    }

    #[test]
    fn reconstruct_falls_back_when_decode_cannot_run() {
        let (store, index, vocab) = fixture_store();
        let model = toy_model(&vocab);
        let queries = vec![alice_query()];
        let gen = extractive(&queries);
        let mut comps = components(&store, &index, &vocab, Some(&model), &gen);
        // an impossible input budget forces assembly to fail
        comps.assembly.max_input_len = 2;
        let run = run_query(&queries[0], ContextMode::Oreo, &comps).unwrap();
        assert!(run.reconstruct_fell_back);
        assert_eq!(run.context_text, store.get("c1").unwrap().text);
    }

    #[test]
    fn empty_query_list_yields_empty_output() {
        let (store, index, vocab) = fixture_store();
        let gen = ExtractiveGenerator::new([]);
        let comps = components(&store, &index, &vocab, None, &gen);
        let runs = run_pipeline(&[], ContextMode::FullContent, &comps);
        assert!(runs.is_empty());
    }

    #[test]
    fn replayed_transcript_is_stable() {
        let (store, index, vocab) = fixture_store();
        let queries: Vec<Query> = (0..20)
            .map(|i| {
                let (name, city) = match i % 3 {
                    0 => ("alice", "paris"),
                    1 => ("bruno", "rome"),
                    _ => ("chloe", "oslo"),
                };
                Query {
                    id: format!("q{i}"),
                    question: format!("where was {name} born {i}"),
                    answers: vec![city.to_string()],
                }
            })
            .collect();
        let gen = extractive(&queries);
        let comps = components(&store, &index, &vocab, None, &gen);
        let first: Vec<String> = run_pipeline(&queries, ContextMode::FullContent, &comps)
            .into_iter()
            .map(|r| r.answer)
            .collect();
        let second: Vec<String> = run_pipeline(&queries, ContextMode::FullContent, &comps)
            .into_iter()
            .map(|r| r.answer)
            .collect();
        assert_eq!(first, second);
        // every answer comes straight out of the planted chunk
        for (q, a) in queries.iter().zip(first.iter()) {
            assert_eq!(a, &q.answers[0]);
        }
    }

    #[test]
    fn phase_times_fit_inside_total_elapsed() {
        let (store, index, vocab) = fixture_store();
        let queries = vec![alice_query()];
        let gen = extractive(&queries);
        let comps = components(&store, &index, &vocab, None, &gen);
        let start = Instant::now();
        let run = run_query(&queries[0], ContextMode::FullContent, &comps).unwrap();
        let total = start.elapsed().as_secs_f64();
        let phases = run.wall_times.retrieve + run.wall_times.reconstruct + run.wall_times.generate;
        assert!(total + 0.05 >= phases);
    }
}
