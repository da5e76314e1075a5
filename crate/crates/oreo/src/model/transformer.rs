//! Tape-recorded forward passes for training.
//!
//! Layout: pre-norm residual blocks, sinusoidal positions, shared token
//! embedding for encoder and decoder inputs, zero-initialized output head
//! (a fresh model therefore starts from the uniform distribution).

use rand::Rng;

use super::ModelConfig;
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Mat;
use crate::tokenizer::BOS;

pub fn init_params(config: &ModelConfig, vocab_size: usize, rng: &mut impl Rng) -> ParamStore {
    let d = config.hidden_dim;
    let ff = 4 * d;
    let mut store = ParamStore::new();
    store.add("tok_embed", Mat::randn(vocab_size, d, rng));
    for l in 0..config.layers {
        for ln in ["ln1", "ln2"] {
            store.add(&format!("enc{l}.{ln}.g"), Mat::from_fn(1, d, |_, _| 1.0));
            store.add(&format!("enc{l}.{ln}.b"), Mat::zeros(1, d));
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.add(&format!("enc{l}.{w}"), Mat::randn(d, d, rng));
        }
        store.add(&format!("enc{l}.ffn.w1"), Mat::randn(d, ff, rng));
        store.add(&format!("enc{l}.ffn.b1"), Mat::zeros(1, ff));
        store.add(&format!("enc{l}.ffn.w2"), Mat::randn(ff, d, rng));
        store.add(&format!("enc{l}.ffn.b2"), Mat::zeros(1, d));
    }
    store.add("enc_ln.g", Mat::from_fn(1, d, |_, _| 1.0));
    store.add("enc_ln.b", Mat::zeros(1, d));
    for l in 0..config.layers {
        for ln in ["ln1", "ln2", "ln3"] {
            store.add(&format!("dec{l}.{ln}.g"), Mat::from_fn(1, d, |_, _| 1.0));
            store.add(&format!("dec{l}.{ln}.b"), Mat::zeros(1, d));
        }
        for w in ["sq", "sk", "sv", "so", "cq", "ck", "cv", "co"] {
            store.add(&format!("dec{l}.{w}"), Mat::randn(d, d, rng));
        }
        store.add(&format!("dec{l}.ffn.w1"), Mat::randn(d, ff, rng));
        store.add(&format!("dec{l}.ffn.b1"), Mat::zeros(1, ff));
        store.add(&format!("dec{l}.ffn.w2"), Mat::randn(ff, d, rng));
        store.add(&format!("dec{l}.ffn.b2"), Mat::zeros(1, d));
    }
    store.add("dec_ln.g", Mat::from_fn(1, d, |_, _| 1.0));
    store.add("dec_ln.b", Mat::zeros(1, d));
    // zero head: the initial output distribution is exactly uniform
    store.add("out_w", Mat::zeros(d, vocab_size));
    store.add("out_b", Mat::zeros(1, vocab_size));
    store
}

/// Sinusoidal position encodings for `len` positions of width `d`.
pub fn positional(len: usize, d: usize) -> Mat {
    Mat::from_fn(len, d, |t, c| positional_at(t, c, d))
}

/// One element of the sinusoidal encoding.
pub fn positional_at(t: usize, c: usize, d: usize) -> f64 {
    let i = (c / 2) as f64;
    let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
    if c % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Decoder input for teacher forcing: BOS followed by all but the last
/// target token.
pub fn shift_right(target: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(target.len());
    out.push(BOS);
    out.extend_from_slice(&target[..target.len() - 1]);
    out
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, x: Var, prefix: &str) -> Var {
    let g = tape.param(store, store.slot(&format!("{prefix}.g")));
    let b = tape.param(store, store.slot(&format!("{prefix}.b")));
    tape.layer_norm(x, g, b)
}

/// Multi-head attention of `x` over keys/values derived from `kv`.
/// `causal` masks future positions (only meaningful when kv == x).
fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    config: &ModelConfig,
    x: Var,
    kv: Var,
    names: [&str; 4],
    prefix: &str,
    causal: bool,
) -> Var {
    let d = config.hidden_dim;
    let dh = d / config.heads;
    let wq = tape.param(store, store.slot(&format!("{prefix}.{}", names[0])));
    let wk = tape.param(store, store.slot(&format!("{prefix}.{}", names[1])));
    let wv = tape.param(store, store.slot(&format!("{prefix}.{}", names[2])));
    let wo = tape.param(store, store.slot(&format!("{prefix}.{}", names[3])));
    let q = tape.matmul(x, wq);
    let k = tape.matmul(kv, wk);
    let v = tape.matmul(kv, wv);

    let q_rows = tape.value(q).rows;
    let k_rows = tape.value(k).rows;
    let mask = causal.then(|| {
        tape.constant(Mat::from_fn(q_rows, k_rows, |r, c| {
            if c > r {
                -1e9
            } else {
                0.0
            }
        }))
    });

    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale_by(scores, 1.0 / (dh as f64).sqrt());
        let scores = match mask {
            Some(m) => tape.add(scores, m),
            None => scores,
        };
        let probs = tape.softmax_rows(scores);
        heads.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat_cols(&heads);
    tape.matmul(ctx, wo)
}

fn ffn(tape: &mut Tape, store: &ParamStore, x: Var, prefix: &str) -> Var {
    let w1 = tape.param(store, store.slot(&format!("{prefix}.w1")));
    let b1 = tape.param(store, store.slot(&format!("{prefix}.b1")));
    let w2 = tape.param(store, store.slot(&format!("{prefix}.w2")));
    let b2 = tape.param(store, store.slot(&format!("{prefix}.b2")));
    let h = tape.matmul(x, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    tape.add_bias(h, b2)
}

fn embed_with_positions(
    tape: &mut Tape,
    store: &ParamStore,
    config: &ModelConfig,
    ids: &[u32],
) -> Var {
    let table = tape.param(store, store.slot("tok_embed"));
    let e = tape.embed(table, ids);
    let e = tape.scale_by(e, (config.hidden_dim as f64).sqrt());
    let pos = tape.constant(positional(ids.len(), config.hidden_dim));
    tape.add(e, pos)
}

/// Encoder stack → final hidden states (L×d).
pub fn encode_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    config: &ModelConfig,
    input_ids: &[u32],
) -> Var {
    assert!(!input_ids.is_empty(), "encoder input must be non-empty");
    let mut x = embed_with_positions(tape, store, config, input_ids);
    for l in 0..config.layers {
        let normed = layer_norm(tape, store, x, &format!("enc{l}.ln1"));
        let attn = attention(
            tape,
            store,
            config,
            normed,
            normed,
            ["wq", "wk", "wv", "wo"],
            &format!("enc{l}"),
            false,
        );
        x = tape.add(x, attn);
        let normed = layer_norm(tape, store, x, &format!("enc{l}.ln2"));
        let f = ffn(tape, store, normed, &format!("enc{l}.ffn"));
        x = tape.add(x, f);
    }
    layer_norm(tape, store, x, "enc_ln")
}

pub struct DecoderOut {
    /// Log-probabilities per decoder position (T×V).
    pub logp: Var,
    /// Final decoder hidden states before the output head (T×d).
    pub hidden: Var,
}

/// Decoder stack over teacher-forced inputs, cross-attending to `enc_out`.
pub fn decode_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    config: &ModelConfig,
    enc_out: Var,
    dec_input_ids: &[u32],
) -> DecoderOut {
    let mut x = embed_with_positions(tape, store, config, dec_input_ids);
    for l in 0..config.layers {
        let normed = layer_norm(tape, store, x, &format!("dec{l}.ln1"));
        let self_attn = attention(
            tape,
            store,
            config,
            normed,
            normed,
            ["sq", "sk", "sv", "so"],
            &format!("dec{l}"),
            true,
        );
        x = tape.add(x, self_attn);
        let normed = layer_norm(tape, store, x, &format!("dec{l}.ln2"));
        let cross = attention(
            tape,
            store,
            config,
            normed,
            enc_out,
            ["cq", "ck", "cv", "co"],
            &format!("dec{l}"),
            false,
        );
        x = tape.add(x, cross);
        let normed = layer_norm(tape, store, x, &format!("dec{l}.ln3"));
        let f = ffn(tape, store, normed, &format!("dec{l}.ffn"));
        x = tape.add(x, f);
    }
    let hidden = layer_norm(tape, store, x, "dec_ln");
    let w = tape.param(store, store.slot("out_w"));
    let b = tape.param(store, store.slot("out_b"));
    let logits = tape.matmul(hidden, w);
    let logits = tape.add_bias(logits, b);
    let logp = tape.log_softmax_rows(logits);
    DecoderOut { logp, hidden }
}
