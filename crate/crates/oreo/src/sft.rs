//! Stage 1: supervised fine-tuning on curated gold contexts.
//!
//! This module also owns input assembly, shared with the later stages and
//! the pipeline: instruction, then question, then chunks in retrieval rank
//! order, joined by separator tokens. Chunks are truncated last-first to fit
//! the input budget; the instruction and question are never truncated.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{transformer, Adam, SeqModel};
use crate::tape::{Tape, Var};
use crate::tokenizer::{Vocab, EOS, SEP};
use crate::{Error, Result};

/// Default instruction prefixed to every reconstructor input (v1).
pub const DEFAULT_INSTRUCTION: &str =
    "extract the evidence needed to answer the question from the chunks";

/// One training record shared by all three stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainExample {
    pub query_id: String,
    pub question: String,
    /// Chunk texts in retrieval rank order.
    pub chunks: Vec<String>,
    pub gold_context: String,
    #[serde(default)]
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over valid target positions (decouples the learning rate from
    /// target length).
    Mean,
    /// Per-example sum of token losses, averaged over the batch.
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub seed: u64,
    pub reduction: LossReduction,
    pub instruction: String,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 5e-5,
            max_input_len: 256,
            max_target_len: 64,
            seed: 0,
            reduction: LossReduction::Mean,
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.max_input_len == 0 || self.max_target_len == 0 {
            return Err(Error::Config("sft sizes must be positive".into()));
        }
        if !matches!(self.batch_size, 4 | 8 | 16) {
            return Err(Error::Config(format!(
                "sft batch_size {} not in {{4, 8, 16}}",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("sft learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One tokenized example: encoder input, target ids and target mask.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub query_id: String,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    /// 1.0 for positions that count toward the loss, 0.0 for padding.
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
    pub reduction: LossReduction,
}

impl TrainingBatch {
    pub fn new(items: Vec<BatchItem>, reduction: LossReduction) -> Self {
        TrainingBatch { items, reduction }
    }
}

/// Assemble the encoder input: instruction `<sep>` question `<sep>`
/// chunk1 `<sep>` chunk2 ... The instruction and question must fit; chunks
/// are cut from the tail.
pub fn assemble_input(
    vocab: &Vocab,
    instruction: &str,
    question: &str,
    chunks: &[String],
    max_input_len: usize,
) -> Result<Vec<u32>> {
    let mut ids = vocab.encode(instruction);
    ids.push(SEP);
    ids.extend(vocab.encode(question));
    ids.push(SEP);
    if ids.len() > max_input_len {
        return Err(Error::Model(format!(
            "instruction and question need {} tokens, budget is {max_input_len}",
            ids.len()
        )));
    }
    for chunk in chunks {
        let remaining = max_input_len - ids.len();
        if remaining < 2 {
            break;
        }
        let mut chunk_ids = vocab.encode(chunk);
        if chunk_ids.len() + 1 > remaining {
            chunk_ids.truncate(remaining - 1);
        }
        ids.extend(chunk_ids);
        ids.push(SEP);
    }
    Ok(ids)
}

/// Tokenize a gold target and close it with EOS, within the length budget.
pub fn assemble_target(vocab: &Vocab, gold: &str, max_target_len: usize) -> Vec<u32> {
    let mut ids = vocab.encode(gold);
    if ids.len() + 1 > max_target_len {
        ids.truncate(max_target_len.saturating_sub(1));
    }
    ids.push(EOS);
    ids
}

pub fn build_batch_item(
    vocab: &Vocab,
    example: &TrainExample,
    config: &SftConfig,
) -> Result<BatchItem> {
    let input_ids = assemble_input(
        vocab,
        &config.instruction,
        &example.question,
        &example.chunks,
        config.max_input_len,
    )?;
    let target_ids = assemble_target(vocab, &example.gold_context, config.max_target_len);
    let mask = vec![1.0; target_ids.len()];
    Ok(BatchItem {
        query_id: example.query_id.clone(),
        input_ids,
        target_ids,
        mask,
    })
}

/// Negative log-likelihood over already-gathered per-token log-probs.
/// The arithmetic core of the stage-1 loss, kept separate so it can be
/// checked by hand.
pub fn masked_nll(per_token_logp: &[f64], mask: &[f64], reduction: LossReduction) -> f64 {
    let valid: f64 = mask.iter().sum();
    let total: f64 = per_token_logp
        .iter()
        .zip(mask.iter())
        .map(|(lp, m)| -lp * m)
        .sum();
    match reduction {
        LossReduction::Mean => total / valid.max(1.0),
        LossReduction::Sum => total,
    }
}

/// Build the batch loss on a tape. Trailing masked positions and encoder
/// padding are stripped first, which is what makes the loss invariant to
/// padding amount.
pub fn sft_loss_on_tape(tape: &mut Tape, model: &SeqModel, batch: &TrainingBatch) -> Result<Var> {
    if batch.items.is_empty() {
        return Err(Error::Model("empty batch".into()));
    }
    let mut per_example: Vec<Var> = Vec::with_capacity(batch.items.len());
    let mut total_valid = 0usize;
    for item in &batch.items {
        let input: Vec<u32> = item
            .input_ids
            .iter()
            .copied()
            .filter(|&t| t != crate::tokenizer::PAD)
            .collect();
        let valid = item
            .mask
            .iter()
            .zip(item.target_ids.iter())
            .take_while(|(m, _)| **m > 0.0)
            .count();
        if valid == 0 {
            return Err(Error::Model(format!(
                "example {} has an all-padding target",
                item.query_id
            )));
        }
        if input.is_empty() {
            return Err(Error::Model(format!(
                "example {} has empty input",
                item.query_id
            )));
        }
        let target = &item.target_ids[..valid];
        total_valid += valid;

        let enc = transformer::encode_on_tape(tape, &model.params, &model.config, &input);
        let dec_in = transformer::shift_right(target);
        let out = transformer::decode_on_tape(tape, &model.params, &model.config, enc, &dec_in);
        let idx: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        let picked = tape.pick_per_row(out.logp, &idx);
        per_example.push(tape.sum_all(picked));
    }
    let mut total = per_example[0];
    for &v in &per_example[1..] {
        total = tape.add(total, v);
    }
    let loss = match batch.reduction {
        LossReduction::Mean => tape.scale_by(total, -1.0 / total_valid as f64),
        LossReduction::Sum => tape.scale_by(total, -1.0 / batch.items.len() as f64),
    };
    Ok(loss)
}

/// Scalar stage-1 loss for inspection and tests.
pub fn sft_loss(model: &SeqModel, batch: &TrainingBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = sft_loss_on_tape(&mut tape, model, batch)?;
    Ok(tape.scalar(loss))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftReport {
    pub curve: Vec<LossPoint>,
    pub epoch_means: Vec<f64>,
    /// Query ids consumed per epoch, in visit order.
    pub consumed: Vec<Vec<String>>,
}

/// Run supervised fine-tuning. A checkpoint is written after every epoch;
/// on divergence the last completed epoch's checkpoint stays on disk.
pub fn run_sft(
    dataset: &[TrainExample],
    model: &mut SeqModel,
    config: &SftConfig,
    checkpoint_dir: &Path,
) -> Result<SftReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Model("empty training dataset".into()));
    }
    let items: Vec<BatchItem> = dataset
        .iter()
        .map(|ex| build_batch_item(&model.vocab, ex, config))
        .collect::<Result<_>>()?;

    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut curve = Vec::new();
    let mut epoch_means = Vec::new();
    let mut consumed = Vec::new();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);
        consumed.push(order.iter().map(|&i| items[i].query_id.clone()).collect());

        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = TrainingBatch::new(
                chunk.iter().map(|&i| items[i].clone()).collect(),
                config.reduction,
            );
            let mut tape = Tape::new();
            let loss = sft_loss_on_tape(&mut tape, model, &batch)?;
            let value = model.train_step(&mut opt, &tape, loss)?;
            step += 1;
            epoch_total += value;
            epoch_batches += 1;
            curve.push(LossPoint {
                epoch,
                step,
                loss: value,
            });
        }
        epoch_means.push(epoch_total / epoch_batches as f64);
        model.save(checkpoint_dir)?;
    }
    Ok(SftReport {
        curve,
        epoch_means,
        consumed,
    })
}
