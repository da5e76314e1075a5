//! Stage 3: PPO alignment against a black-box generator.
//!
//! Reconstructions are sampled from the policy, scored end-to-end through
//! the generator (ROUGE of its answer against gold), distributed to tokens
//! by confidence weighting, KL-regularized against the frozen pre-alignment
//! policy, turned into advantages with GAE, and optimized with the clipped
//! surrogate plus a value regression term. The value head is a scalar
//! projection of the decoder state, added to the parameter store when
//! alignment starts and trained jointly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::clients::GeneratorClient;
use crate::metrics::rouge_l;
use crate::model::{infer, transformer, Adam, SeqModel};
use crate::sft::{self, SftConfig, TrainExample};
use crate::tape::{softmax_slice, Tape, Var};
use crate::tensor::Mat;
use crate::tokenizer::{BOS, EOS};
use crate::{Error, Result};

pub const VALUE_W: &str = "value_w";
pub const VALUE_B: &str = "value_b";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Ratio clip width.
    pub clip: f64,
    pub gamma: f64,
    pub lam: f64,
    /// Weight of the value regression term.
    pub value_coef: f64,
    /// Weight of the per-token KL penalty inside the reward.
    pub kl_coef: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub max_new_tokens: usize,
    pub min_new_tokens: usize,
    pub iterations: usize,
    /// Queries rolled out per iteration.
    pub rollout_batch: usize,
    pub learning_rate: f64,
    /// Early-stop ceiling for the mean KL to the frozen policy.
    pub kl_ceiling: f64,
    pub advantage_norm: bool,
    /// Regress the value head on raw per-token rewards instead of returns.
    pub raw_reward_target: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 0.95,
            lam: 0.95,
            value_coef: 0.5,
            kl_coef: 0.1,
            top_k: 4,
            top_p: 0.95,
            ppo_epochs: 2,
            minibatch_size: 4,
            max_new_tokens: 32,
            min_new_tokens: 1,
            iterations: 10,
            rollout_batch: 8,
            learning_rate: 5e-5,
            kl_ceiling: 5.0,
            advantage_norm: true,
            raw_reward_target: false,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.clip && self.clip < 1.0) {
            return Err(Error::Config(format!("ppo clip {} outside (0, 1)", self.clip)));
        }
        for (name, v) in [("gamma", self.gamma), ("lam", self.lam)] {
            if !(0.0 < v && v <= 1.0) {
                return Err(Error::Config(format!("ppo {name} {v} outside (0, 1]")));
            }
        }
        if self.value_coef < 0.0 || self.kl_coef < 0.0 {
            return Err(Error::Config("ppo coefficients must be non-negative".into()));
        }
        if self.ppo_epochs == 0 || self.minibatch_size == 0 || self.rollout_batch == 0 {
            return Err(Error::Config("ppo sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled episode with everything the update needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    /// Encoder input (the state prefix all actions condition on).
    pub input_ids: Vec<u32>,
    /// Chosen tokens, one action per step.
    pub actions: Vec<u32>,
    pub logp_current: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub reg_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub seq_reward: f64,
    pub context_text: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Add the scalar value head to a model that does not have one yet.
/// Zero-initialized: value estimates start at 0, so advantages carry no
/// critic noise until real rewards have shaped the head.
pub fn ensure_value_head(model: &mut SeqModel) {
    if model.params.try_slot(VALUE_W).is_none() {
        let d = model.config.hidden_dim;
        model.params.add(VALUE_W, Mat::zeros(d, 1));
        model.params.add(VALUE_B, Mat::zeros(1, 1));
    }
}

fn value_of(model: &SeqModel, hidden: &Mat) -> f64 {
    let w = model.params.by_name(VALUE_W);
    let b = model.params.by_name(VALUE_B);
    let mut v = b.data[0];
    for c in 0..hidden.cols {
        v += hidden.at(0, c) * w.at(c, 0);
    }
    v
}

/// Sample one reconstruction episode. Rewards are left unfilled; values and
/// all three log-prob tracks are recorded per token. Empty samples retry
/// once greedily; a still-empty episode is an error so the caller can skip.
pub fn rollout(
    example: &TrainExample,
    policy: &SeqModel,
    reference: &SeqModel,
    sft_config: &SftConfig,
    config: &PpoConfig,
    seed: u64,
) -> Result<Trajectory> {
    let input = sft::assemble_input(
        &policy.vocab,
        &sft_config.instruction,
        &example.question,
        &example.chunks,
        sft_config.max_input_len,
    )?;
    let max_tokens = config.max_new_tokens.min(policy.config.max_output_len);

    let sample_pass = |greedy: bool| -> (Vec<u32>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoded = infer::encode(policy, &input);
        let mut state = infer::start_state(&policy.config);
        let mut actions = Vec::new();
        let mut logps = Vec::new();
        let mut values = Vec::new();
        let mut last = BOS;
        loop {
            let (logp, hidden) = infer::step(policy, &encoded, &mut state, last);
            values.push(value_of(policy, &hidden));
            let (id, lp) = if greedy {
                infer::pick_sampled(&logp, actions.len(), config.min_new_tokens, 1, 1.0, &mut rng)
            } else {
                infer::pick_sampled(
                    &logp,
                    actions.len(),
                    config.min_new_tokens,
                    config.top_k,
                    config.top_p,
                    &mut rng,
                )
            };
            actions.push(id);
            logps.push(lp);
            if id == EOS || actions.len() >= max_tokens {
                break;
            }
            last = id;
        }
        (actions, logps, values)
    };

    let (mut actions, mut logps, mut values) = sample_pass(false);
    if actions.iter().all(|&a| a == EOS) {
        (actions, logps, values) = sample_pass(true);
        if actions.iter().all(|&a| a == EOS) {
            return Err(Error::Model(format!(
                "empty rollout for {} even under greedy retry",
                example.query_id
            )));
        }
    }

    // reference log-probs for the same action sequence
    let ref_encoded = infer::encode(reference, &input);
    let mut ref_state = infer::start_state(&reference.config);
    let mut logp_ref = Vec::with_capacity(actions.len());
    let mut last = BOS;
    for &action in &actions {
        let (logp, _) = infer::step(reference, &ref_encoded, &mut ref_state, last);
        logp_ref.push(logp[action as usize]);
        last = action;
    }

    let visible: Vec<u32> = actions.iter().copied().filter(|&a| a != EOS).collect();
    let context_text = policy.vocab.decode(&visible);
    let n = actions.len();
    Ok(Trajectory {
        query_id: example.query_id.clone(),
        input_ids: input,
        actions,
        logp_current: logps.clone(),
        logp_old: logps,
        logp_ref,
        values,
        rewards: vec![0.0; n],
        reg_rewards: vec![0.0; n],
        advantages: vec![0.0; n],
        returns: vec![0.0; n],
        seq_reward: 0.0,
        context_text,
    })
}

/// End-to-end reward: the generator answers from the reconstructed context
/// and the answer is ROUGE-scored against the gold answers (best match).
pub fn sequence_reward(
    client: &dyn GeneratorClient,
    question: &str,
    context: &str,
    gold_answers: &[String],
) -> Result<f64> {
    let answer = client.answer(question, context)?;
    Ok(gold_answers
        .iter()
        .map(|gold| rouge_l(&answer, gold))
        .fold(0.0, f64::max))
}

/// Distribute a sequence-level reward to tokens in proportion to the
/// policy's confidence: R_t = R * softmax over positions of log-probs.
/// The distribution sums to one, so token rewards conserve the total.
pub fn token_rewards(logp_current: &[f64], seq_reward: f64) -> Vec<f64> {
    softmax_slice(logp_current)
        .into_iter()
        .map(|w| w * seq_reward)
        .collect()
}

/// Per-token KL regularization: R̂_t = R_t - δ (log π(a|s) - log π₀(a|s)).
pub fn regularized_rewards(
    rewards: &[f64],
    logp_current: &[f64],
    logp_ref: &[f64],
    kl_coef: f64,
) -> Vec<f64> {
    rewards
        .iter()
        .zip(logp_current.iter().zip(logp_ref.iter()))
        .map(|(r, (lp, lr))| r - kl_coef * (lp - lr))
        .collect()
}

/// Generalized advantage estimation with a zero-value terminal successor.
/// Returns (advantages, returns) where returns = A + V.
pub fn gae_advantages(
    reg_rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = reg_rewards.len();
    let mut advantages = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = reg_rewards[t] + gamma * next_value - values[t];
        gae = delta + gamma * lam * gae;
        advantages[t] = gae;
    }
    let returns = advantages.iter().zip(values.iter()).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// One clipped surrogate term: min(r·A, clip(r, 1-ε, 1+ε)·A).
pub fn clipped_term(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

pub struct PpoLossStats {
    pub loss: f64,
    pub policy_term: f64,
    pub value_term: f64,
    pub clip_fraction: f64,
}

/// Build the minibatch loss on a tape:
/// -mean(min(r·A, clip(r)·A)) + β·mean((V - target)²).
pub fn ppo_loss_on_tape(
    tape: &mut Tape,
    policy: &SeqModel,
    minibatch: &[&Trajectory],
    config: &PpoConfig,
) -> Result<(Var, PpoLossStats)> {
    if minibatch.is_empty() {
        return Err(Error::Model("empty ppo minibatch".into()));
    }
    let total_tokens: usize = minibatch.iter().map(|t| t.len()).sum();

    // advantage normalization is per minibatch, over all tokens; a nearly
    // constant batch is left alone rather than having its noise blown up
    let advantages: Vec<Vec<f64>> = {
        let mut all: Vec<f64> = minibatch.iter().flat_map(|t| t.advantages.clone()).collect();
        if config.advantage_norm && all.len() > 1 {
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all.len() as f64;
            let std = var.sqrt();
            if std > 1e-6 {
                all.iter_mut().for_each(|a| *a = (*a - mean) / std);
            }
        }
        let mut out = Vec::new();
        let mut offset = 0;
        for t in minibatch {
            out.push(all[offset..offset + t.len()].to_vec());
            offset += t.len();
        }
        out
    };

    let vw = tape.param(&policy.params, policy.params.slot(VALUE_W));
    let vb = tape.param(&policy.params, policy.params.slot(VALUE_B));

    let mut policy_sum: Option<Var> = None;
    let mut value_sum: Option<Var> = None;
    let mut clipped_count = 0usize;
    for (trajectory, adv) in minibatch.iter().zip(advantages.iter()) {
        let enc = transformer::encode_on_tape(
            tape,
            &policy.params,
            &policy.config,
            &trajectory.input_ids,
        );
        let dec_in = transformer::shift_right(&trajectory.actions);
        let out = transformer::decode_on_tape(tape, &policy.params, &policy.config, enc, &dec_in);
        let idx: Vec<usize> = trajectory.actions.iter().map(|&a| a as usize).collect();
        let logp_new = tape.pick_per_row(out.logp, &idx);

        let logp_old = tape.constant(Mat::from_vec(
            trajectory.len(),
            1,
            trajectory.logp_old.clone(),
        ));
        let log_ratio = tape.sub(logp_new, logp_old);
        // non-finite ratios are impossible once the log-ratio is clamped
        let log_ratio = tape.clip_const(log_ratio, -20.0, 20.0);
        let ratio = tape.exp(log_ratio);
        clipped_count += tape
            .value(ratio)
            .data
            .iter()
            .filter(|r| (**r - 1.0).abs() > config.clip)
            .count();
        let adv_mat = tape.constant(Mat::from_vec(trajectory.len(), 1, adv.clone()));
        let surr1 = tape.mul(ratio, adv_mat);
        let clipped = tape.clip_const(ratio, 1.0 - config.clip, 1.0 + config.clip);
        let surr2 = tape.mul(clipped, adv_mat);
        let term = tape.min_elem(surr1, surr2);
        let term_sum = tape.sum_all(term);
        policy_sum = Some(match policy_sum {
            Some(acc) => tape.add(acc, term_sum),
            None => term_sum,
        });

        let values_new = tape.matmul(out.hidden, vw);
        let values_new = tape.add_bias(values_new, vb);
        let target = if config.raw_reward_target {
            &trajectory.rewards
        } else {
            &trajectory.returns
        };
        let target = tape.constant(Mat::from_vec(trajectory.len(), 1, target.clone()));
        let diff = tape.sub(values_new, target);
        let sq = tape.mul(diff, diff);
        let sq_sum = tape.sum_all(sq);
        value_sum = Some(match value_sum {
            Some(acc) => tape.add(acc, sq_sum),
            None => sq_sum,
        });
    }

    let policy_mean = tape.scale_by(policy_sum.unwrap(), -1.0 / total_tokens as f64);
    let value_mean = tape.scale_by(value_sum.unwrap(), config.value_coef / total_tokens as f64);
    let loss = tape.add(policy_mean, value_mean);
    let stats = PpoLossStats {
        loss: tape.scalar(loss),
        policy_term: tape.scalar(policy_mean),
        value_term: tape.scalar(value_mean),
        clip_fraction: clipped_count as f64 / total_tokens as f64,
    };
    Ok((loss, stats))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoIterStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoReport {
    pub iterations: Vec<PpoIterStats>,
    pub stopped_early: bool,
}

/// Mean over tokens of log π - log π₀ at rollout time.
fn mean_kl(trajectories: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in trajectories {
        for (lp, lr) in t.logp_current.iter().zip(t.logp_ref.iter()) {
            total += lp - lr;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn derive_seed(base: u64, iteration: usize, query_id: &str) -> u64 {
    let mut hasher = sha2::Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update((iteration as u64).to_le_bytes());
    hasher.update(query_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Run the alignment loop: rollout, reward, regularize, GAE, clipped
/// updates. The pre-alignment policy is snapshotted once and kept frozen.
pub fn run_ppo(
    dataset: &[TrainExample],
    policy: &mut SeqModel,
    client: &dyn GeneratorClient,
    sft_config: &SftConfig,
    config: &PpoConfig,
    checkpoint_dir: &Path,
) -> Result<PpoReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Model("empty alignment dataset".into()));
    }
    ensure_value_head(policy);
    let reference = policy.clone();
    let mut opt = Adam::new(&policy.params, config.learning_rate);
    let mut report = PpoReport {
        iterations: Vec::new(),
        stopped_early: false,
    };

    for iteration in 0..config.iterations {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (iteration as u64).wrapping_mul(0x2545f491),
        );
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        order.truncate(config.rollout_batch);

        let mut trajectories: Vec<Trajectory> = Vec::new();
        let mut skipped = 0usize;
        for &idx in &order {
            let example = &dataset[idx];
            let seed = derive_seed(config.seed, iteration, &example.query_id);
            let mut trajectory =
                match rollout(example, policy, &reference, sft_config, config, seed) {
                    Ok(t) => t,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
            let seq_reward = match sequence_reward(
                client,
                &example.question,
                &trajectory.context_text,
                &example.answers,
            ) {
                Ok(r) => r,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            trajectory.seq_reward = seq_reward;
            trajectory.rewards = token_rewards(&trajectory.logp_current, seq_reward);
            trajectory.reg_rewards = regularized_rewards(
                &trajectory.rewards,
                &trajectory.logp_current,
                &trajectory.logp_ref,
                config.kl_coef,
            );
            let (adv, ret) = gae_advantages(
                &trajectory.reg_rewards,
                &trajectory.values,
                config.gamma,
                config.lam,
            );
            trajectory.advantages = adv;
            trajectory.returns = ret;
            trajectories.push(trajectory);
        }
        if trajectories.is_empty() {
            return Err(Error::Model(format!(
                "iteration {iteration}: every rollout failed or was skipped"
            )));
        }

        let iteration_kl = mean_kl(&trajectories);
        let mean_reward =
            trajectories.iter().map(|t| t.seq_reward).sum::<f64>() / trajectories.len() as f64;

        let mut clip_fractions = Vec::new();
        let mut value_losses = Vec::new();
        for _ in 0..config.ppo_epochs {
            for group in trajectories.chunks(config.minibatch_size) {
                let refs: Vec<&Trajectory> = group.iter().collect();
                let mut tape = Tape::new();
                let (loss, stats) = ppo_loss_on_tape(&mut tape, policy, &refs, config)?;
                policy.train_step(&mut opt, &tape, loss)?;
                clip_fractions.push(stats.clip_fraction);
                value_losses.push(stats.value_term);
            }
        }
        report.iterations.push(PpoIterStats {
            iteration,
            mean_reward,
            mean_kl: iteration_kl,
            clip_fraction: clip_fractions.iter().sum::<f64>() / clip_fractions.len() as f64,
            value_loss: value_losses.iter().sum::<f64>() / value_losses.len() as f64,
            skipped,
        });
        policy.save(checkpoint_dir)?;

        if iteration_kl.abs() > config.kl_ceiling {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}
