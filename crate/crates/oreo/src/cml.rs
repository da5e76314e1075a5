//! Stage 2: contrastive multi-task learning.
//!
//! Each epoch the model's own beam-search predictions are regenerated,
//! ranked by ROUGE-L against the gold context, and paired up (better rank
//! against worse, margin scaled by the rank gap). The hinge over cosine
//! similarities between the chunk embedding and candidate embeddings is
//! combined with the stage-1 loss. Embeddings are mean-pooled encoder
//! states of the model itself. Gold contexts of the other in-batch
//! examples join each candidate set as extra negatives one rank past the
//! worst.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::rouge_l;
use crate::model::{Adam, DecodeMode, DecodeParams, Generated, SeqModel};
use crate::sft::{self, SftConfig, TrainExample, TrainingBatch};
use crate::tape::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CmlConfig {
    /// Margin scale per unit of rank gap.
    pub eta: f64,
    /// Weight of the stage-1 loss inside the combined objective.
    pub alpha: f64,
    pub beam_width: usize,
    pub max_candidates: usize,
    pub epochs: usize,
    pub max_pairs_per_example: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_new_tokens: usize,
    pub min_new_tokens: usize,
    pub seed: u64,
}

impl Default for CmlConfig {
    fn default() -> Self {
        CmlConfig {
            eta: 0.01,
            alpha: 0.5,
            beam_width: 8,
            max_candidates: 12,
            epochs: 3,
            max_pairs_per_example: 16,
            learning_rate: 5e-5,
            batch_size: 4,
            max_new_tokens: 48,
            min_new_tokens: 1,
            seed: 0,
        }
    }
}

impl CmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("cml eta must be positive, alpha non-negative".into()));
        }
        if self.max_candidates > 12 {
            return Err(Error::Config(format!(
                "cml max_candidates {} exceeds the cap of 12",
                self.max_candidates
            )));
        }
        if self.beam_width == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("cml sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub logprob: f64,
}

/// Beam-search self-predictions with ROUGE ranks (1 = closest to gold).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
    pub rouge_to_gold: Vec<f64>,
    /// ranks[i] is the 1-based rank of candidates[i].
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    /// Candidate index with the better (smaller) rank.
    pub positive: usize,
    /// Candidate index with the worse rank.
    pub negative: usize,
    pub rank_gap: usize,
}

/// Collapse duplicate surface strings, keeping the best-scored occurrence,
/// and cap the set size.
pub fn dedupe_candidates(generated: &[Generated], model: &SeqModel, cap: usize) -> Vec<Candidate> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for g in generated {
        let text = model.vocab.decode(&g.ids);
        if text.trim().is_empty() || !seen.insert(text.clone()) {
            continue;
        }
        out.push(Candidate {
            text,
            logprob: g.logprob,
        });
        if out.len() == cap {
            break;
        }
    }
    out
}

/// Beam-decode up to `max_candidates` distinct candidate texts. Fewer than
/// two distinct candidates is an error so callers can skip the example.
pub fn generate_candidates(
    example: &TrainExample,
    model: &SeqModel,
    config: &CmlConfig,
    sft_config: &SftConfig,
) -> Result<CandidateSet> {
    let input = sft::assemble_input(
        &model.vocab,
        &sft_config.instruction,
        &example.question,
        &example.chunks,
        sft_config.max_input_len,
    )?;
    let params = DecodeParams {
        mode: DecodeMode::Beam,
        beam_width: config.beam_width,
        num_return: config.beam_width,
        max_tokens: config.max_new_tokens.min(model.config.max_output_len),
        min_tokens: config.min_new_tokens,
        ..DecodeParams::default()
    };
    let generated = model.generate(&input, &params)?;
    let candidates = dedupe_candidates(&generated, model, config.max_candidates);
    if candidates.len() < 2 {
        return Err(Error::Model(format!(
            "example {} produced {} distinct candidates, need at least 2",
            example.query_id,
            candidates.len()
        )));
    }
    Ok(CandidateSet {
        query_id: example.query_id.clone(),
        candidates,
        rouge_to_gold: Vec::new(),
        ranks: Vec::new(),
    })
}

/// Rank candidates by ROUGE-L F1 against the gold context, descending.
/// Equal scores keep the earlier candidate ahead.
pub fn rank_candidates(mut set: CandidateSet, gold: &str) -> Result<CandidateSet> {
    if gold.trim().is_empty() {
        return Err(Error::Model("empty gold context for ranking".into()));
    }
    set.rouge_to_gold = set
        .candidates
        .iter()
        .map(|c| rouge_l(&c.text, gold))
        .collect();
    let mut order: Vec<usize> = (0..set.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        set.rouge_to_gold[b]
            .partial_cmp(&set.rouge_to_gold[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    let mut ranks = vec![0usize; set.candidates.len()];
    for (rank, &idx) in order.iter().enumerate() {
        ranks[idx] = rank + 1;
    }
    set.ranks = ranks;
    Ok(set)
}

/// All ordered (better, worse) pairs, capped by largest rank gap first.
pub fn build_pairs(ranks: &[usize], max_pairs: usize) -> Vec<ContrastivePair> {
    let mut pairs = Vec::new();
    for i in 0..ranks.len() {
        for j in 0..ranks.len() {
            if ranks[i] < ranks[j] {
                pairs.push(ContrastivePair {
                    positive: i,
                    negative: j,
                    rank_gap: ranks[j] - ranks[i],
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.rank_gap
            .cmp(&a.rank_gap)
            .then_with(|| a.positive.cmp(&b.positive))
            .then_with(|| a.negative.cmp(&b.negative))
    });
    pairs.truncate(max_pairs);
    pairs
}

/// One hinge term: max(0, cos(E_D, E_c-) - cos(E_D, E_c+) + eta * gap).
/// The arithmetic core, kept standalone for hand checks.
pub fn hinge_term(cos_pos: f64, cos_neg: f64, eta: f64, rank_gap: usize) -> f64 {
    (cos_neg - cos_pos + eta * rank_gap as f64).max(0.0)
}

/// Mean-pooled encoder states of a text under the current model.
pub fn embed_on_tape(tape: &mut Tape, model: &SeqModel, text: &str) -> Result<Var> {
    let mut ids = model.vocab.encode(text);
    ids.truncate(model.config.max_input_len);
    if ids.is_empty() {
        return Err(Error::Model("cannot embed empty text".into()));
    }
    let enc = crate::model::transformer::encode_on_tape(tape, &model.params, &model.config, &ids);
    Ok(tape.mean_rows(enc))
}

/// Convenience: the embedding as plain numbers.
pub fn embed(model: &SeqModel, text: &str) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = embed_on_tape(&mut tape, model, text)?;
    Ok(tape.value(v).data.clone())
}

pub struct CmlLossParts {
    pub total: Var,
    pub hinge: Var,
    /// Unscaled stage-1 component; the total adds `alpha` times this.
    pub sft_raw: Var,
}

/// Texts ranked for one example: its own candidates plus any extra
/// negatives (in-batch golds), each with a rank.
pub struct RankedTexts<'a> {
    pub texts: Vec<&'a str>,
    pub ranks: Vec<usize>,
}

/// Combined loss for one example: hinge over the ranked texts plus
/// alpha times the stage-1 loss.
pub fn cml_loss_on_tape(
    tape: &mut Tape,
    model: &SeqModel,
    example: &TrainExample,
    ranked: &RankedTexts,
    pairs: &[ContrastivePair],
    config: &CmlConfig,
    sft_config: &SftConfig,
) -> Result<CmlLossParts> {
    let chunks_joined = example.chunks.join(" ");
    let e_d = embed_on_tape(tape, model, &chunks_joined)?;
    let embeds: Vec<Var> = ranked
        .texts
        .iter()
        .map(|t| embed_on_tape(tape, model, t))
        .collect::<Result<_>>()?;
    let cosines: Vec<Var> = embeds.iter().map(|&e| tape.cosine(e_d, e)).collect();

    let mut hinge = tape.scalar_const(0.0);
    for pair in pairs {
        let diff = tape.sub(cosines[pair.negative], cosines[pair.positive]);
        let margin = tape.scalar_const(config.eta * pair.rank_gap as f64);
        let shifted = tape.add(diff, margin);
        let term = tape.relu(shifted);
        hinge = tape.add(hinge, term);
    }

    let item = sft::build_batch_item(&model.vocab, example, sft_config)?;
    let batch = TrainingBatch::new(vec![item], sft_config.reduction);
    let sft_raw = sft::sft_loss_on_tape(tape, model, &batch)?;
    let scaled_sft = tape.scale_by(sft_raw, config.alpha);
    let total = tape.add(hinge, scaled_sft);
    Ok(CmlLossParts {
        total,
        hinge,
        sft_raw,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateDump {
    pub epoch: usize,
    pub query_id: String,
    pub text: String,
    pub logprob: f64,
    pub rouge: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmlEpoch {
    pub epoch: usize,
    pub mean_hinge: f64,
    /// Unscaled stage-1 component mean; multiply by alpha for its share of
    /// the total.
    pub mean_sft_raw: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmlReport {
    pub epochs: Vec<CmlEpoch>,
    pub dumps: Vec<CandidateDump>,
    pub skipped: Vec<String>,
}

/// Run contrastive multi-task training from a stage-1 checkpoint.
pub fn run_cml(
    dataset: &[TrainExample],
    model: &mut SeqModel,
    config: &CmlConfig,
    sft_config: &SftConfig,
    checkpoint_dir: &Path,
) -> Result<CmlReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Model("empty training dataset".into()));
    }
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut report = CmlReport {
        epochs: Vec::new(),
        dumps: Vec::new(),
        skipped: Vec::new(),
    };

    for epoch in 0..config.epochs {
        // recent predictions: regenerate from the current model each epoch
        let mut ranked_sets: Vec<(usize, CandidateSet)> = Vec::new();
        for (idx, example) in dataset.iter().enumerate() {
            match generate_candidates(example, model, config, sft_config) {
                Ok(set) => {
                    let set = rank_candidates(set, &example.gold_context)?;
                    for (i, cand) in set.candidates.iter().enumerate() {
                        report.dumps.push(CandidateDump {
                            epoch,
                            query_id: set.query_id.clone(),
                            text: cand.text.clone(),
                            logprob: cand.logprob,
                            rouge: set.rouge_to_gold[i],
                            rank: set.ranks[i],
                        });
                    }
                    ranked_sets.push((idx, set));
                }
                Err(e) => {
                    report
                        .skipped
                        .push(format!("epoch {epoch} {}: {e}", example.query_id));
                }
            }
        }
        if ranked_sets.is_empty() {
            return Err(Error::Model(
                "no example produced enough distinct candidates".into(),
            ));
        }

        let mut order: Vec<usize> = (0..ranked_sets.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x5851f42d));
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0);
        let mut count = 0usize;
        for group in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let mut batch_total: Option<Var> = None;
            let mut batch_hinge = 0.0;
            let mut batch_sft = 0.0;
            for &k in group {
                let (example_idx, set) = &ranked_sets[k];
                let example = &dataset[*example_idx];
                // in-batch golds join as extra negatives past the worst rank
                let worst = set.candidates.len();
                let mut texts: Vec<&str> =
                    set.candidates.iter().map(|c| c.text.as_str()).collect();
                let mut ranks = set.ranks.clone();
                for &other in group {
                    if other == k {
                        continue;
                    }
                    let other_example = &dataset[ranked_sets[other].0];
                    texts.push(other_example.gold_context.as_str());
                    ranks.push(worst + 1);
                }
                let pairs = build_pairs(&ranks, config.max_pairs_per_example);
                let ranked = RankedTexts { texts, ranks };
                let parts =
                    cml_loss_on_tape(&mut tape, model, example, &ranked, &pairs, config, sft_config)?;
                batch_hinge += tape.scalar(parts.hinge);
                batch_sft += tape.scalar(parts.sft_raw);
                batch_total = Some(match batch_total {
                    Some(acc) => tape.add(acc, parts.total),
                    None => parts.total,
                });
            }
            let total = batch_total.expect("non-empty batch");
            let mean = tape.scale_by(total, 1.0 / group.len() as f64);
            let value = model.train_step(&mut opt, &tape, mean)?;
            sums.0 += batch_hinge / group.len() as f64;
            sums.1 += batch_sft / group.len() as f64;
            sums.2 += value;
            count += 1;
        }
        report.epochs.push(CmlEpoch {
            epoch,
            mean_hinge: sums.0 / count as f64,
            mean_sft_raw: sums.1 / count as f64,
            mean_total: sums.2 / count as f64,
        });
        model.save(checkpoint_dir)?;
    }
    Ok(report)
}
