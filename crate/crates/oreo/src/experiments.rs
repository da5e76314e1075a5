//! Evaluation records and the experiment protocols: per-query scoring,
//! efficiency summaries, noise and shuffle robustness, zero-shot transfer,
//! token-length ablation, and judge scoring.
//!
//! Protocol reports carry no wall-clock fields, so rerunning with the same
//! seeds reproduces them byte for byte. Latency appears only where it is
//! copied from run files.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::clients::{ClientParams, GeneratorClient, TeacherClient};
use crate::metrics::{contains_answer, exact_match, unigram_f1};
use crate::model::{params_digest, SeqModel};
use crate::pipeline::{
    run_pipeline, run_query, ContextMode, PipelineComponents, PipelineRun, Query,
};
use crate::prompts::PromptSet;
use crate::retrieval::DocumentChunk;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub mode: ContextMode,
    pub prediction: String,
    pub gold_answers: Vec<String>,
    pub em: u8,
    pub f1: f64,
    pub context_token_count: usize,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub mode: ContextMode,
    pub mean_em: f64,
    pub mean_f1: f64,
    pub mean_tokens: f64,
    /// Copied from run files when evaluating runs; protocol commands that
    /// generate contexts in-process leave it at 0 to stay reproducible.
    pub mean_latency: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<String>,
}

/// Score pipeline runs against the gold answers of their queries.
pub fn evaluate_runs(
    runs: &[PipelineRun],
    queries: &[Query],
    dataset: &str,
) -> Result<(Vec<EvalRecord>, Vec<MetricReport>)> {
    if runs.is_empty() {
        return Err(Error::Eval("no runs to evaluate".into()));
    }
    let golds: HashMap<&str, &Vec<String>> =
        queries.iter().map(|q| (q.id.as_str(), &q.answers)).collect();
    let mut records = Vec::new();
    for run in runs.iter().filter(|r| !r.failed) {
        let Some(gold) = golds.get(run.query_id.as_str()) else {
            return Err(Error::Eval(format!(
                "run references unknown query {}",
                run.query_id
            )));
        };
        records.push(EvalRecord {
            query_id: run.query_id.clone(),
            mode: run.mode,
            prediction: run.answer.clone(),
            gold_answers: (*gold).clone(),
            em: exact_match(&run.answer, gold),
            f1: unigram_f1(&run.answer, gold),
            context_token_count: run.context_token_count,
            latency_seconds: run.wall_times.retrieve
                + run.wall_times.reconstruct
                + run.wall_times.generate,
        });
    }
    let mut modes: Vec<ContextMode> = Vec::new();
    for r in &records {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let reports = modes
        .into_iter()
        .map(|mode| {
            let of_mode: Vec<&EvalRecord> = records.iter().filter(|r| r.mode == mode).collect();
            summarize(&of_mode, dataset, mode, None)
        })
        .collect();
    Ok((records, reports))
}

fn summarize(
    records: &[&EvalRecord],
    dataset: &str,
    mode: ContextMode,
    transfer: Option<String>,
) -> MetricReport {
    let n = records.len();
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| -> f64 {
        records.iter().map(|r| f(r)).sum::<f64>() / n as f64
    };
    MetricReport {
        dataset: dataset.to_string(),
        mode,
        mean_em: mean(&|r| r.em as f64),
        mean_f1: mean(&|r| r.f1),
        mean_tokens: mean(&|r| r.context_token_count as f64),
        mean_latency: mean(&|r| r.latency_seconds),
        n,
        transfer,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub mode: ContextMode,
    pub mean_tokens: f64,
    pub mean_latency: f64,
    /// Mean tokens of this mode divided by the full-content mean.
    pub compression_vs_full: Option<f64>,
    pub n: usize,
}

/// Token/latency summary per mode, with compression ratios against the
/// full-content baseline when it is present.
pub fn efficiency_report(runs: &[PipelineRun]) -> Result<Vec<EfficiencyRow>> {
    if runs.is_empty() {
        return Err(Error::Eval("no runs for the efficiency report".into()));
    }
    let mut modes: Vec<ContextMode> = Vec::new();
    for r in runs.iter().filter(|r| !r.failed) {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let stats: Vec<(ContextMode, f64, f64, usize)> = modes
        .iter()
        .map(|&mode| {
            let of_mode: Vec<&PipelineRun> =
                runs.iter().filter(|r| r.mode == mode && !r.failed).collect();
            let n = of_mode.len();
            let tokens =
                of_mode.iter().map(|r| r.context_token_count as f64).sum::<f64>() / n as f64;
            let latency = of_mode
                .iter()
                .map(|r| r.wall_times.retrieve + r.wall_times.reconstruct + r.wall_times.generate)
                .sum::<f64>()
                / n as f64;
            (mode, tokens, latency, n)
        })
        .collect();
    let full_tokens = stats
        .iter()
        .find(|(m, ..)| *m == ContextMode::FullContent)
        .map(|(_, t, ..)| *t);
    Ok(stats
        .into_iter()
        .map(|(mode, mean_tokens, mean_latency, n)| EfficiencyRow {
            mode,
            mean_tokens,
            mean_latency,
            compression_vs_full: full_tokens.map(|full| mean_tokens / full),
            n,
        })
        .collect())
}

// ── noise robustness ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseRow {
    pub mode: ContextMode,
    /// Number of injected irrelevant chunks.
    pub m: usize,
    pub mean_em: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseReport {
    pub rows: Vec<NoiseRow>,
    /// Queries without a single answer-bearing chunk.
    pub excluded: usize,
}

fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = sha2::Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}

/// Keep one answer-bearing chunk per query and add m in {0..=max_noise}
/// sampled irrelevant chunks; report EM per m for the given modes.
pub fn noise_experiment(
    queries: &[Query],
    components: &PipelineComponents,
    modes: &[ContextMode],
    max_noise: usize,
    seed: u64,
) -> Result<NoiseReport> {
    let store = components.store;
    let mut rows = Vec::new();
    let mut excluded = 0usize;

    // per-query fixed material: the kept answer chunk and the noise pool
    let mut prepared: Vec<(&Query, &DocumentChunk, Vec<&DocumentChunk>)> = Vec::new();
    for query in queries {
        let bearing: Vec<&DocumentChunk> = store
            .chunks()
            .iter()
            .filter(|c| query.answers.iter().any(|a| contains_answer(&c.text, a)))
            .collect();
        let Some(&answer_chunk) = bearing.first() else {
            excluded += 1;
            continue;
        };
        let pool: Vec<&DocumentChunk> = store
            .chunks()
            .iter()
            .filter(|c| !query.answers.iter().any(|a| contains_answer(&c.text, a)))
            .collect();
        prepared.push((query, answer_chunk, pool));
    }
    if prepared.is_empty() {
        return Err(Error::Eval(
            "noise experiment: no query has an answer-bearing chunk".into(),
        ));
    }

    for &mode in modes {
        for m in 0..=max_noise {
            let mut em_total = 0.0;
            for (query, answer_chunk, pool) in &prepared {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &query.id));
                let mut pool: Vec<&DocumentChunk> = pool.clone();
                pool.shuffle(&mut rng);
                let injected: Vec<&DocumentChunk> = pool.into_iter().take(m).collect();
                // the injected chunks must all fail answer containment
                for chunk in &injected {
                    debug_assert!(
                        !query.answers.iter().any(|a| contains_answer(&chunk.text, a))
                    );
                }
                let mut chunks = vec![*answer_chunk];
                chunks.extend(injected);
                let context = match mode {
                    ContextMode::Oreo => {
                        let model = components.model.ok_or_else(|| {
                            Error::Config("the oreo mode needs a trained checkpoint".into())
                        })?;
                        crate::pipeline::reconstruct(
                            &query.question,
                            &chunks,
                            model,
                            &components.decode,
                            &components.assembly,
                            components.hop_type,
                        )
                        .0
                    }
                    other => crate::pipeline::build_context(&chunks, other, components.hop_type),
                };
                let answer = components.generator.answer(&query.question, &context)?;
                em_total += exact_match(&answer, &query.answers) as f64;
            }
            rows.push(NoiseRow {
                mode,
                m,
                mean_em: em_total / prepared.len() as f64,
                n: prepared.len(),
            });
        }
    }
    Ok(NoiseReport { rows, excluded })
}

// ── shuffle robustness ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub mode: ContextMode,
    pub mean_em_original: f64,
    pub mean_em_shuffled: f64,
    pub mean_f1_original: f64,
    pub mean_f1_shuffled: f64,
    pub n: usize,
    /// True when every query's shuffled chunk multiset matched the original.
    pub multisets_match: bool,
}

/// Rerun each query with its retrieved chunks in a seeded random order and
/// compare paired metrics. The chunk multiset is asserted unchanged.
pub fn shuffle_experiment(
    queries: &[Query],
    components: &PipelineComponents,
    mode: ContextMode,
    seed: u64,
) -> Result<ShuffleReport> {
    if queries.is_empty() {
        return Err(Error::Eval("shuffle experiment without queries".into()));
    }
    let mut em = (0.0, 0.0);
    let mut f1 = (0.0, 0.0);
    for query in queries {
        let retrieved = components.index.retrieve_topk(
            components.store,
            &query.id,
            &query.question,
            components.k,
        )?;
        let chunks: Vec<&DocumentChunk> = retrieved
            .entries
            .iter()
            .filter_map(|e| components.store.get(&e.chunk_id))
            .collect();
        let mut shuffled = chunks.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &query.id));
        shuffled.shuffle(&mut rng);

        // permutation property: same chunks, possibly different order
        let mut ids_a: Vec<&str> = chunks.iter().map(|c| c.id.as_str()).collect();
        let mut ids_b: Vec<&str> = shuffled.iter().map(|c| c.id.as_str()).collect();
        ids_a.sort_unstable();
        ids_b.sort_unstable();
        if ids_a != ids_b {
            return Err(Error::Eval(format!(
                "shuffle changed the chunk multiset for query {}",
                query.id
            )));
        }

        for (arm, chunk_list) in [(0, &chunks), (1, &shuffled)] {
            let context = match mode {
                ContextMode::Oreo => {
                    let model = components.model.ok_or_else(|| {
                        Error::Config("the oreo mode needs a trained checkpoint".into())
                    })?;
                    crate::pipeline::reconstruct(
                        &query.question,
                        chunk_list,
                        model,
                        &components.decode,
                        &components.assembly,
                        components.hop_type,
                    )
                    .0
                }
                other => crate::pipeline::build_context(chunk_list, other, components.hop_type),
            };
            let answer = components.generator.answer(&query.question, &context)?;
            let em_v = exact_match(&answer, &query.answers) as f64;
            let f1_v = unigram_f1(&answer, &query.answers);
            if arm == 0 {
                em.0 += em_v;
                f1.0 += f1_v;
            } else {
                em.1 += em_v;
                f1.1 += f1_v;
            }
        }
    }
    let n = queries.len() as f64;
    Ok(ShuffleReport {
        mode,
        mean_em_original: em.0 / n,
        mean_em_shuffled: em.1 / n,
        mean_f1_original: f1.0 / n,
        mean_f1_shuffled: f1.1 / n,
        n: queries.len(),
        multisets_match: true,
    })
}

// ── zero-shot transfer ──

/// Evaluate a checkpoint trained elsewhere on this dataset, without any
/// parameter updates. The parameter blob is checksummed before and after
/// to prove nothing moved.
pub fn zero_shot_eval(
    checkpoint_dir: &Path,
    queries: &[Query],
    components: &PipelineComponents,
    source_tag: &str,
    target_tag: &str,
) -> Result<MetricReport> {
    let digest_before = params_digest(checkpoint_dir)?;
    let runs = run_pipeline(queries, ContextMode::Oreo, components);
    let digest_after = params_digest(checkpoint_dir)?;
    if digest_before != digest_after {
        return Err(Error::Eval(
            "zero-shot evaluation modified the checkpoint parameters".into(),
        ));
    }
    let (records, _) = evaluate_runs(&runs, queries, target_tag)?;
    let refs: Vec<&EvalRecord> = records.iter().collect();
    if refs.is_empty() {
        return Err(Error::Eval("zero-shot evaluation produced no records".into()));
    }
    let mut report = summarize(
        &refs,
        target_tag,
        ContextMode::Oreo,
        Some(format!("{source_tag}->{target_tag}")),
    );
    // in-process generation: keep the report reproducible
    report.mean_latency = 0.0;
    Ok(report)
}

// ── token-length ablation ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPoint {
    pub min_tokens: usize,
    pub report: MetricReport,
    /// Smallest context token count seen at this threshold.
    pub min_context_tokens: usize,
}

/// Sweep the minimum-token threshold for reconstruction with retrieval
/// fixed, one report per threshold.
pub fn ablation_sweep(
    queries: &[Query],
    components: &PipelineComponents,
    thresholds: &[usize],
    dataset: &str,
) -> Result<Vec<AblationPoint>> {
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ablation thresholds must be ascending".into()));
    }
    let model = components
        .model
        .ok_or_else(|| Error::Config("the ablation sweep needs a trained checkpoint".into()))?;
    let mut out = Vec::new();
    for &threshold in thresholds {
        let mut decode = components.decode.clone();
        decode.min_tokens = threshold;
        decode.max_tokens = decode.max_tokens.max(threshold + threshold / 2 + 8);
        let sweep_components = PipelineComponents {
            store: components.store,
            index: components.index,
            vocab: components.vocab,
            model: Some(model),
            generator: components.generator,
            decode,
            assembly: components.assembly.clone(),
            k: components.k,
            hop_type: components.hop_type,
        };
        let runs = run_pipeline(queries, ContextMode::Oreo, &sweep_components);
        let (records, _) = evaluate_runs(&runs, queries, dataset)?;
        let refs: Vec<&EvalRecord> = records.iter().collect();
        let mut report = summarize(&refs, dataset, ContextMode::Oreo, None);
        report.mean_latency = 0.0;
        let min_context_tokens = runs
            .iter()
            .filter(|r| !r.failed)
            .map(|r| r.context_token_count)
            .min()
            .unwrap_or(0);
        out.push(AblationPoint {
            min_tokens: threshold,
            report,
            min_context_tokens,
        });
    }
    Ok(out)
}

// ── judge scoring ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeScores {
    pub query_id: String,
    pub faithfulness: f64,
    pub completeness: f64,
    pub rationale: String,
}

/// Parse "<score> <rationale>" with the first real number as the score.
pub fn parse_judge_score(completion: &str) -> Option<(f64, String)> {
    for (i, token) in completion.split_whitespace().enumerate() {
        let cleaned = token.trim_matches(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'));
        if let Ok(score) = cleaned.parse::<f64>() {
            let rationale = completion
                .split_whitespace()
                .skip(i + 1)
                .collect::<Vec<_>>()
                .join(" ");
            return Some((score, rationale));
        }
    }
    None
}

/// Ask the judge to score one reconstructed context for faithfulness and
/// completeness. An unparseable or out-of-range completion is reprompted
/// once; failing again yields Ok(None) so the caller can count it invalid.
pub fn llm_judge(
    query: &Query,
    original_chunks: &[DocumentChunk],
    context: &str,
    judge: &dyn TeacherClient,
    prompts: &PromptSet,
) -> Result<Option<JudgeScores>> {
    let passages = original_chunks
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let mut scores = [f64::NAN; 2];
    let mut rationales = [String::new(), String::new()];
    for (i, prompt) in [
        prompts.faithfulness_prompt(&query.question, &passages, context)?,
        prompts.completeness_prompt(&query.question, &passages, context)?,
    ]
    .iter()
    .enumerate()
    {
        let mut parsed = None;
        for _attempt in 0..2 {
            let completion = judge.complete(prompt, &ClientParams::default())?;
            if let Some((score, rationale)) = parse_judge_score(&completion) {
                if (0.0..=10.0).contains(&score) {
                    parsed = Some((score, rationale));
                    break;
                }
            }
        }
        match parsed {
            Some((score, rationale)) => {
                scores[i] = score;
                rationales[i] = rationale;
            }
            None => return Ok(None),
        }
    }
    Ok(Some(JudgeScores {
        query_id: query.id.clone(),
        faithfulness: scores[0],
        completeness: scores[1],
        rationale: format!(
            "faithfulness: {} | completeness: {}",
            rationales[0], rationales[1]
        ),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub mean_faithfulness: f64,
    pub mean_completeness: f64,
    pub n: usize,
    pub invalid: usize,
}

pub fn summarize_judge(scores: &[JudgeScores], invalid: usize) -> Result<JudgeSummary> {
    if scores.is_empty() {
        return Err(Error::Eval("no valid judge scores".into()));
    }
    let n = scores.len() as f64;
    Ok(JudgeSummary {
        mean_faithfulness: scores.iter().map(|s| s.faithfulness).sum::<f64>() / n,
        mean_completeness: scores.iter().map(|s| s.completeness).sum::<f64>() / n,
        n: scores.len(),
        invalid,
    })
}
