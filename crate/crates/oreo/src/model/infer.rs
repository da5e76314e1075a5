//! Cached incremental decoding: greedy, beam search and top-k/top-p
//! sampling. This path never touches the tape; equivalence with the
//! training forward is covered by tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{positional, positional_at};
use super::{ModelConfig, SeqModel};
use crate::tape::softmax_slice;
use crate::tensor::Mat;
use crate::tokenizer::{BOS, EOS, PAD};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub num_return: usize,
    /// 0 disables the top-k filter.
    pub top_k: usize,
    pub top_p: f64,
    pub max_tokens: usize,
    pub min_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            mode: DecodeMode::Beam,
            beam_width: 4,
            num_return: 1,
            top_k: 4,
            top_p: 0.95,
            max_tokens: 48,
            min_tokens: 1,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Beam && (self.beam_width == 0 || self.num_return > self.beam_width)
        {
            return Err(Error::Config(format!(
                "num_return {} must be within beam_width {}",
                self.num_return, self.beam_width
            )));
        }
        if !(0.0 < self.top_p && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "min_tokens {} exceeds max_tokens {}",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// One generated sequence and its summed token log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Emitted tokens, EOS excluded.
    pub ids: Vec<u32>,
    /// Sum of token log-probs for every emitted token, EOS included when
    /// it closed the sequence. No length normalization.
    pub logprob: f64,
    pub ended_with_eos: bool,
}

// ── plain-matrix forward helpers ──

fn layer_norm_rows(x: &Mat, gamma: &Mat, beta: &Mat) -> Mat {
    const EPS: f64 = 1e-5;
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.cols as f64;
        let istd = 1.0 / (var + EPS).sqrt();
        for c in 0..x.cols {
            *out.at_mut(r, c) = gamma.at(0, c) * (row[c] - mean) * istd + beta.at(0, c);
        }
    }
    out
}

fn add_bias_rows(x: &mut Mat, bias: &Mat) {
    for r in 0..x.rows {
        for c in 0..x.cols {
            *x.at_mut(r, c) += bias.at(0, c);
        }
    }
}

fn gelu_rows(x: &mut Mat) {
    for v in &mut x.data {
        *v = crate::tape::gelu(*v);
    }
}

/// Per-head attention of a single query row against cached keys/values
/// stored as full-width (t×d) matrices.
fn attend_single(q: &Mat, keys: &Mat, values: &Mat, heads: usize) -> Mat {
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = keys.rows;
    let mut out = Mat::zeros(1, d);
    for h in 0..heads {
        let off = h * dh;
        let mut scores = Vec::with_capacity(t);
        for r in 0..t {
            let mut s = 0.0;
            for c in 0..dh {
                s += q.at(0, off + c) * keys.at(r, off + c);
            }
            scores.push(s * scale);
        }
        let probs = softmax_slice(&scores);
        for (r, p) in probs.iter().enumerate() {
            for c in 0..dh {
                *out.at_mut(0, off + c) += p * values.at(r, off + c);
            }
        }
    }
    out
}

/// Encoder output with per-layer cross-attention keys/values precomputed.
pub struct Encoded {
    pub enc_out: Mat,
    cross_k: Vec<Mat>,
    cross_v: Vec<Mat>,
}

/// Incremental decoder state (grows one row per emitted token).
#[derive(Clone)]
pub struct DecState {
    step: usize,
    self_k: Vec<Mat>,
    self_v: Vec<Mat>,
}

/// Run the encoder without recording a tape.
pub fn encode(model: &SeqModel, input_ids: &[u32]) -> Encoded {
    let config = &model.config;
    let p = &model.params;
    let d = config.hidden_dim;
    let heads = config.heads;
    let dh = d / heads;
    let table = p.by_name("tok_embed");
    let mut x = Mat::zeros(input_ids.len(), d);
    for (r, &id) in input_ids.iter().enumerate() {
        x.row_mut(r).copy_from_slice(table.row(id as usize));
    }
    x.scale((d as f64).sqrt());
    let pos = positional(input_ids.len(), d);
    x.add_scaled(&pos, 1.0);

    for l in 0..config.layers {
        let normed = layer_norm_rows(
            &x,
            p.by_name(&format!("enc{l}.ln1.g")),
            p.by_name(&format!("enc{l}.ln1.b")),
        );
        let q = normed.matmul(p.by_name(&format!("enc{l}.wq")));
        let k = normed.matmul(p.by_name(&format!("enc{l}.wk")));
        let v = normed.matmul(p.by_name(&format!("enc{l}.wv")));
        let rows = x.rows;
        let mut ctx = Mat::zeros(rows, d);
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..heads {
            let off = h * dh;
            for i in 0..rows {
                let mut scores = Vec::with_capacity(rows);
                for j in 0..rows {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q.at(i, off + c) * k.at(j, off + c);
                    }
                    scores.push(s * scale);
                }
                let probs = softmax_slice(&scores);
                for (j, pr) in probs.iter().enumerate() {
                    for c in 0..dh {
                        *ctx.at_mut(i, off + c) += pr * v.at(j, off + c);
                    }
                }
            }
        }
        let attn = ctx.matmul(p.by_name(&format!("enc{l}.wo")));
        x.add_scaled(&attn, 1.0);

        let normed = layer_norm_rows(
            &x,
            p.by_name(&format!("enc{l}.ln2.g")),
            p.by_name(&format!("enc{l}.ln2.b")),
        );
        let mut h1 = normed.matmul(p.by_name(&format!("enc{l}.ffn.w1")));
        add_bias_rows(&mut h1, p.by_name(&format!("enc{l}.ffn.b1")));
        gelu_rows(&mut h1);
        let mut h2 = h1.matmul(p.by_name(&format!("enc{l}.ffn.w2")));
        add_bias_rows(&mut h2, p.by_name(&format!("enc{l}.ffn.b2")));
        x.add_scaled(&h2, 1.0);
    }
    let enc_out = layer_norm_rows(&x, p.by_name("enc_ln.g"), p.by_name("enc_ln.b"));

    let cross_k = (0..config.layers)
        .map(|l| enc_out.matmul(p.by_name(&format!("dec{l}.ck"))))
        .collect();
    let cross_v = (0..config.layers)
        .map(|l| enc_out.matmul(p.by_name(&format!("dec{l}.cv"))))
        .collect();
    Encoded {
        enc_out,
        cross_k,
        cross_v,
    }
}

pub fn start_state(config: &ModelConfig) -> DecState {
    DecState {
        step: 0,
        self_k: (0..config.layers).map(|_| Mat::zeros(0, config.hidden_dim)).collect(),
        self_v: (0..config.layers).map(|_| Mat::zeros(0, config.hidden_dim)).collect(),
    }
}

fn append_row(cache: &mut Mat, row: &Mat) {
    debug_assert_eq!(row.rows, 1);
    cache.data.extend_from_slice(&row.data);
    cache.rows += 1;
    cache.cols = row.cols;
}

/// Advance the decoder by one token. Returns the log-distribution over the
/// vocabulary and the final hidden row (for value heads).
pub fn step(model: &SeqModel, encoded: &Encoded, state: &mut DecState, token: u32) -> (Vec<f64>, Mat) {
    let config = &model.config;
    let p = &model.params;
    let d = config.hidden_dim;
    let table = p.by_name("tok_embed");
    let mut x = Mat::zeros(1, d);
    x.row_mut(0).copy_from_slice(table.row(token as usize));
    x.scale((d as f64).sqrt());
    for c in 0..d {
        *x.at_mut(0, c) += positional_at(state.step, c, d);
    }

    for l in 0..config.layers {
        let normed = layer_norm_rows(
            &x,
            p.by_name(&format!("dec{l}.ln1.g")),
            p.by_name(&format!("dec{l}.ln1.b")),
        );
        let q = normed.matmul(p.by_name(&format!("dec{l}.sq")));
        let k = normed.matmul(p.by_name(&format!("dec{l}.sk")));
        let v = normed.matmul(p.by_name(&format!("dec{l}.sv")));
        append_row(&mut state.self_k[l], &k);
        append_row(&mut state.self_v[l], &v);
        let ctx = attend_single(&q, &state.self_k[l], &state.self_v[l], config.heads);
        let attn = ctx.matmul(p.by_name(&format!("dec{l}.so")));
        x.add_scaled(&attn, 1.0);

        let normed = layer_norm_rows(
            &x,
            p.by_name(&format!("dec{l}.ln2.g")),
            p.by_name(&format!("dec{l}.ln2.b")),
        );
        let q = normed.matmul(p.by_name(&format!("dec{l}.cq")));
        let ctx = attend_single(&q, &encoded.cross_k[l], &encoded.cross_v[l], config.heads);
        let cross = ctx.matmul(p.by_name(&format!("dec{l}.co")));
        x.add_scaled(&cross, 1.0);

        let normed = layer_norm_rows(
            &x,
            p.by_name(&format!("dec{l}.ln3.g")),
            p.by_name(&format!("dec{l}.ln3.b")),
        );
        let mut h1 = normed.matmul(p.by_name(&format!("dec{l}.ffn.w1")));
        add_bias_rows(&mut h1, p.by_name(&format!("dec{l}.ffn.b1")));
        gelu_rows(&mut h1);
        let mut h2 = h1.matmul(p.by_name(&format!("dec{l}.ffn.w2")));
        add_bias_rows(&mut h2, p.by_name(&format!("dec{l}.ffn.b2")));
        x.add_scaled(&h2, 1.0);
    }
    let hidden = layer_norm_rows(&x, p.by_name("dec_ln.g"), p.by_name("dec_ln.b"));
    let mut logits = hidden.matmul(p.by_name("out_w"));
    add_bias_rows(&mut logits, p.by_name("out_b"));

    // log-softmax over the full vocabulary
    let row = logits.row(0);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    let logp = row.iter().map(|v| v - log_sum).collect();

    state.step += 1;
    (logp, hidden)
}

/// Tokens that may never be emitted, and EOS while under min_tokens.
fn banned(id: u32, emitted: usize, min_tokens: usize) -> bool {
    id == PAD || id == BOS || (id == EOS && emitted < min_tokens)
}

pub fn generate(model: &SeqModel, input: &[u32], params: &DecodeParams) -> Result<Vec<Generated>> {
    let encoded = encode(model, input);
    match params.mode {
        DecodeMode::Greedy => Ok(vec![greedy(model, &encoded, params)]),
        DecodeMode::Beam => Ok(beam(model, &encoded, params)),
        DecodeMode::Sample => Ok(vec![sample(model, &encoded, params)]),
    }
}

fn greedy(model: &SeqModel, encoded: &Encoded, params: &DecodeParams) -> Generated {
    let mut state = start_state(&model.config);
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    let mut last = BOS;
    let mut ended_with_eos = false;
    while ids.len() < params.max_tokens {
        let (logp, _) = step(model, encoded, &mut state, last);
        let mut best: Option<(u32, f64)> = None;
        for (id, &lp) in logp.iter().enumerate() {
            let id = id as u32;
            if banned(id, ids.len(), params.min_tokens) {
                continue;
            }
            if best.map_or(true, |(_, b)| lp > b) {
                best = Some((id, lp));
            }
        }
        let (id, lp) = best.expect("vocabulary exhausted");
        logprob += lp;
        if id == EOS {
            ended_with_eos = true;
            break;
        }
        ids.push(id);
        last = id;
    }
    Generated {
        ids,
        logprob,
        ended_with_eos,
    }
}

#[derive(Clone)]
struct Hyp {
    ids: Vec<u32>,
    logprob: f64,
    state: DecState,
    last: u32,
}

fn beam(model: &SeqModel, encoded: &Encoded, params: &DecodeParams) -> Vec<Generated> {
    let width = params.beam_width;
    let mut active = vec![Hyp {
        ids: Vec::new(),
        logprob: 0.0,
        state: start_state(&model.config),
        last: BOS,
    }];
    let mut finished: Vec<Generated> = Vec::new();

    for _ in 0..params.max_tokens {
        let mut expansions: Vec<(usize, u32, f64)> = Vec::new();
        let mut stepped: Vec<(Vec<f64>, DecState)> = Vec::with_capacity(active.len());
        for hyp in &active {
            let mut state = hyp.state.clone();
            let (logp, _) = step(model, encoded, &mut state, hyp.last);
            for (id, &lp) in logp.iter().enumerate() {
                let id = id as u32;
                if banned(id, hyp.ids.len(), params.min_tokens) {
                    continue;
                }
                expansions.push((stepped.len(), id, hyp.logprob + lp));
            }
            stepped.push((logp, state));
        }
        // best-first, ties by (hypothesis index, token id) for determinism
        expansions.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| a.1.cmp(&b.1))
        });
        let mut next = Vec::with_capacity(width);
        for (h, id, total) in expansions {
            if next.len() >= width {
                break;
            }
            if id == EOS {
                finished.push(Generated {
                    ids: active[h].ids.clone(),
                    logprob: total,
                    ended_with_eos: true,
                });
                continue;
            }
            let mut ids = active[h].ids.clone();
            ids.push(id);
            next.push(Hyp {
                ids,
                logprob: total,
                state: stepped[h].1.clone(),
                last: id,
            });
        }
        active = next;
        if active.is_empty() || finished.len() >= width {
            break;
        }
    }
    for hyp in active {
        finished.push(Generated {
            ids: hyp.ids,
            logprob: hyp.logprob,
            ended_with_eos: false,
        });
    }
    finished.sort_by(|a, b| {
        b.logprob
            .partial_cmp(&a.logprob)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.ids.cmp(&b.ids))
    });
    finished.truncate(params.num_return.max(1));
    finished
}

/// Draw one token from a full log-distribution after banning, top-k and
/// nucleus filtering. Returns the token and its log-probability under the
/// unfiltered distribution.
pub fn pick_sampled(
    logp: &[f64],
    emitted: usize,
    min_tokens: usize,
    top_k: usize,
    top_p: f64,
    rng: &mut impl Rng,
) -> (u32, f64) {
    let mut allowed: Vec<(u32, f64)> = logp
        .iter()
        .enumerate()
        .filter(|(id, _)| !banned(*id as u32, emitted, min_tokens))
        .map(|(id, &lp)| (id as u32, lp))
        .collect();
    // highest probability first, ties by id
    allowed.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    if top_k > 0 {
        allowed.truncate(top_k);
    }
    // nucleus: smallest prefix with cumulative mass >= top_p
    let probs = softmax_slice(&allowed.iter().map(|(_, lp)| *lp).collect::<Vec<_>>());
    if top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = allowed.len();
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= top_p {
                keep = i + 1;
                break;
            }
        }
        allowed.truncate(keep);
    }
    let probs = softmax_slice(&allowed.iter().map(|(_, lp)| *lp).collect::<Vec<_>>());
    let draw: f64 = rng.gen();
    let mut cum = 0.0;
    let mut chosen = allowed.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if draw < cum {
            chosen = i;
            break;
        }
    }
    allowed[chosen]
}

fn sample(model: &SeqModel, encoded: &Encoded, params: &DecodeParams) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut state = start_state(&model.config);
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    let mut last = BOS;
    let mut ended_with_eos = false;
    while ids.len() < params.max_tokens {
        let (logp, _) = step(model, encoded, &mut state, last);
        let (id, lp) = pick_sampled(
            &logp,
            ids.len(),
            params.min_tokens,
            params.top_k,
            params.top_p,
            &mut rng,
        );
        logprob += lp;
        if id == EOS {
            ended_with_eos = true;
            break;
        }
        ids.push(id);
        last = id;
    }
    Generated {
        ids,
        logprob,
        ended_with_eos,
    }
}
