//! The trainable sequence-to-sequence reconstructor.
//!
//! A pre-norm encoder-decoder transformer over the subword vocabulary,
//! small enough to train on a CPU in minutes. All math is f64 and every
//! forward used for training runs through the autograd tape, so gradients
//! are exact. Generation uses a separate cached inference path; the two are
//! checked against each other in tests.

pub mod infer;
pub mod optim;
pub mod transformer;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{ParamStore, Tape};
use crate::tensor::Mat;
use crate::tokenizer::Vocab;
use crate::{Error, Result};

pub use infer::{generate, DecodeMode, DecodeParams, Generated};
pub use optim::Adam;

/// Architecture and capacity limits.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Cap for the trainable subword vocabulary.
    pub vocab_size: usize,
    pub hidden_dim: usize,
    /// Encoder layers; the decoder uses the same count.
    pub layers: usize,
    pub heads: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // desk-scale reference configuration: CPU-trainable in minutes
        ModelConfig {
            vocab_size: 8000,
            hidden_dim: 128,
            layers: 2,
            heads: 4,
            max_input_len: 256,
            max_output_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A deliberately tiny configuration for gradient checks and fast tests.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            hidden_dim: 16,
            layers: 2,
            heads: 2,
            max_input_len: 32,
            max_output_len: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 6 {
            return Err(Error::Config("vocab_size must be at least 6".into()));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_input_len", self.max_input_len),
            ("max_output_len", self.max_output_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// A token id sequence with vocabulary bounds checked at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Model(format!(
                "token id {bad} out of range for vocab of {vocab_size}"
            )));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-position log-probabilities for a teacher-forced target, with access
/// to the full distribution at every step.
pub struct TokenLogProbs {
    /// log p(c_t | x, c_<t) for each target position.
    pub per_token: Vec<f64>,
    /// Full log-distribution rows, one per target position (T×V).
    pub distributions: Mat,
}

/// Encoder-decoder model: configuration, vocabulary and parameters.
#[derive(Clone)]
pub struct SeqModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl SeqModel {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = transformer::init_params(&config, vocab.size(), &mut rng);
        Ok(SeqModel {
            config,
            vocab,
            params,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn check_input(&self, input: &[u32]) -> Result<()> {
        if input.len() > self.config.max_input_len {
            return Err(Error::Model(format!(
                "input of {} tokens exceeds max_input_len {}",
                input.len(),
                self.config.max_input_len
            )));
        }
        Ok(())
    }

    /// Teacher-forced log-probabilities of `target` given `input`.
    pub fn token_logprobs(&self, input: &[u32], target: &[u32]) -> Result<TokenLogProbs> {
        self.check_input(input)?;
        if target.len() > self.config.max_output_len {
            return Err(Error::Model(format!(
                "target of {} tokens exceeds max_output_len {}",
                target.len(),
                self.config.max_output_len
            )));
        }
        if target.is_empty() {
            return Err(Error::Model("empty target".into()));
        }
        let mut tape = Tape::new();
        let enc = transformer::encode_on_tape(&mut tape, &self.params, &self.config, input);
        let dec_input = transformer::shift_right(target);
        let out = transformer::decode_on_tape(
            &mut tape,
            &self.params,
            &self.config,
            enc,
            &dec_input,
        );
        let logp = tape.value(out.logp).clone();
        let per_token = target
            .iter()
            .enumerate()
            .map(|(t, &id)| logp.at(t, id as usize))
            .collect();
        Ok(TokenLogProbs {
            per_token,
            distributions: logp,
        })
    }

    /// Generate output sequences for an encoded input.
    pub fn generate(&self, input: &[u32], params: &DecodeParams) -> Result<Vec<Generated>> {
        self.check_input(input)?;
        params.validate()?;
        infer::generate(self, input, params)
    }

    /// Apply one optimizer step from an already-built tape and scalar loss.
    /// Fails on non-finite loss without touching the parameters.
    pub fn train_step(&mut self, opt: &mut Adam, tape: &Tape, loss: crate::tape::Var) -> Result<f64> {
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss {loss_value}; parameters left untouched"
            )));
        }
        let grads = tape.backward(loss, &self.params);
        if !grads.is_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        opt.step(&mut self.params, &grads);
        Ok(loss_value)
    }

    // ── checkpoint format: config.json + params.bin + vocab.json ──

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config_json = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::Model(format!("config serialization: {e}")))?;
        std::fs::write(dir.join("config.json"), config_json)
            .map_err(|e| Error::io(dir.join("config.json"), e))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        write_params(&dir.join("params.bin"), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config_path = dir.join("config.json");
        let config_json =
            std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config: ModelConfig = serde_json::from_str(&config_json)
            .map_err(|e| Error::Model(format!("config parse: {e}")))?;
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        let mut model = SeqModel::new(config, vocab)?;
        read_params(&dir.join("params.bin"), &mut model.params)?;
        Ok(model)
    }
}

fn write_params(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(b"ORE1");
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (slot, name) in store.names().iter().enumerate() {
        let mat = store.get(slot);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(mat.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(mat.cols as u64).to_le_bytes());
        for v in &mat.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_params(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *pos + n > bytes.len() {
            return Err(Error::Model("truncated parameter file".into()));
        }
        let s = bytes[*pos..*pos + n].to_vec();
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != b"ORE1" {
        return Err(Error::Model("bad parameter file magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.as_slice().try_into().unwrap()) as usize;
    for _ in 0..count {
        let name_len =
            u32::from_le_bytes(take(&mut pos, 4)?.as_slice().try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Model("bad parameter name".into()))?;
        let rows = u64::from_le_bytes(take(&mut pos, 8)?.as_slice().try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut pos, 8)?.as_slice().try_into().unwrap()) as usize;
        let raw = take(&mut pos, rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mat = Mat::from_vec(rows, cols, data);
        match store.try_slot(&name) {
            Some(slot) => {
                let existing = store.get(slot);
                if (existing.rows, existing.cols) != (mat.rows, mat.cols) {
                    return Err(Error::Model(format!(
                        "parameter {name} has shape {}x{}, expected {}x{}",
                        mat.rows, mat.cols, existing.rows, existing.cols
                    )));
                }
                *store.get_mut(slot) = mat;
            }
            // extra parameters (e.g. a value head saved after alignment)
            // are kept so checkpoints round-trip
            None => {
                store.add(&name, mat);
            }
        }
    }
    Ok(())
}

/// Hex SHA-256 of a checkpoint's parameter blob.
pub fn params_digest(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let path = dir.join("params.bin");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, EOS, PAD};
    use rand::Rng;

    fn toy_vocab() -> Vocab {
        Vocab::train(
            &["a b c d e f g h".to_string(), "a b c a b c".to_string()],
            64,
        )
    }

    fn toy_model(seed: u64) -> SeqModel {
        let vocab = toy_vocab();
        let config = ModelConfig::toy(vocab.size(), seed);
        SeqModel::new(config, vocab).unwrap()
    }

    /// Give the zero-initialized head small random weights so output
    /// distributions are non-degenerate.
    fn randomize_head(model: &mut SeqModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["out_w", "out_b"] {
            let slot = model.params.slot(name);
            let mat = model.params.get_mut(slot);
            for v in &mut mat.data {
                *v = crate::tape::randn(&mut rng) * 0.5;
            }
        }
    }

    #[test]
    fn fresh_model_is_uniform() {
        let model = toy_model(3);
        let v = model.vocab_size() as f64;
        let input = model.vocab.encode("a b c");
        let target = model.vocab.encode("d e");
        let out = model.token_logprobs(&input, &target).unwrap();
        for lp in &out.per_token {
            assert!((lp + v.ln()).abs() < 1e-9, "logprob {lp} vs -ln(V) {}", -v.ln());
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let mut model = toy_model(4);
        randomize_head(&mut model, 40);
        let input = model.vocab.encode("a b c d");
        let target = model.vocab.encode("e f g");
        let out = model.token_logprobs(&input, &target).unwrap();
        for t in 0..out.distributions.rows {
            let total: f64 = out.distributions.row(t).iter().map(|lp| lp.exp()).sum();
            assert!((total - 1.0).abs() < 1e-5, "row {t} sums to {total}");
            assert!(out.per_token[t] <= 0.0);
        }
    }

    #[test]
    fn target_longer_than_limit_errors() {
        let model = toy_model(5);
        let input = model.vocab.encode("a");
        let target = vec![EOS; model.config.max_output_len + 1];
        assert!(model.token_logprobs(&input, &target).is_err());
    }

    #[test]
    fn train_and_inference_paths_agree() {
        let mut model = toy_model(6);
        randomize_head(&mut model, 60);
        let input = model.vocab.encode("a b c d e");
        let target = model.vocab.encode("f g h a");
        let train = model.token_logprobs(&input, &target).unwrap();

        let encoded = infer::encode(&model, &input);
        let mut state = infer::start_state(&model.config);
        let mut last = BOS;
        for (t, &id) in target.iter().enumerate() {
            let (logp, _) = infer::step(&model, &encoded, &mut state, last);
            assert!(
                (logp[id as usize] - train.per_token[t]).abs() < 1e-9,
                "position {t}: infer {} vs train {}",
                logp[id as usize],
                train.per_token[t]
            );
            last = id;
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = toy_model(7);
        randomize_head(&mut model, 70);
        model.save(dir.path()).unwrap();
        let loaded = SeqModel::load(dir.path()).unwrap();
        assert_eq!(model.params.flat(), loaded.params.flat());
        let input = model.vocab.encode("a b");
        let target = model.vocab.encode("c d");
        let a = model.token_logprobs(&input, &target).unwrap();
        let b = loaded.token_logprobs(&input, &target).unwrap();
        assert_eq!(a.per_token, b.per_token);
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        let mut model = toy_model(8);
        randomize_head(&mut model, 80);
        let input = model.vocab.encode("a b c");
        let greedy = model
            .generate(
                &input,
                &DecodeParams {
                    mode: DecodeMode::Greedy,
                    max_tokens: 6,
                    ..DecodeParams::default()
                },
            )
            .unwrap();
        let beam = model
            .generate(
                &input,
                &DecodeParams {
                    mode: DecodeMode::Beam,
                    beam_width: 1,
                    num_return: 1,
                    max_tokens: 6,
                    ..DecodeParams::default()
                },
            )
            .unwrap();
        assert_eq!(greedy[0].ids, beam[0].ids);
        assert!((greedy[0].logprob - beam[0].logprob).abs() < 1e-9);
    }

    #[test]
    fn beam_returns_distinct_sorted_sequences() {
        let mut model = toy_model(9);
        randomize_head(&mut model, 90);
        let input = model.vocab.encode("a b c d");
        let out = model
            .generate(
                &input,
                &DecodeParams {
                    mode: DecodeMode::Beam,
                    beam_width: 8,
                    num_return: 8,
                    max_tokens: 4,
                    min_tokens: 2,
                    ..DecodeParams::default()
                },
            )
            .unwrap();
        assert_eq!(out.len(), 8);
        for w in out.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
            assert_ne!(w[0].ids, w[1].ids);
        }
        for g in &out {
            assert!(g.ids.len() >= 2 || g.ended_with_eos);
        }
    }

    #[test]
    fn beam_matches_exhaustive_enumeration() {
        let mut model = toy_model(10);
        randomize_head(&mut model, 100);
        let input = model.vocab.encode("a b");
        let horizon = 2;
        let params = DecodeParams {
            mode: DecodeMode::Beam,
            beam_width: 64,
            num_return: 64,
            max_tokens: horizon,
            min_tokens: horizon,
            ..DecodeParams::default()
        };
        let beam = model.generate(&input, &params).unwrap();

        // brute force every allowed two-token sequence via teacher forcing
        let allowed: Vec<u32> = (0..model.vocab_size() as u32)
            .filter(|&id| id != PAD && id != BOS && id != EOS)
            .collect();
        let mut enumerated: Vec<(Vec<u32>, f64)> = Vec::new();
        for &t1 in &allowed {
            for &t2 in &allowed {
                let out = model.token_logprobs(&input, &[t1, t2]).unwrap();
                enumerated.push((vec![t1, t2], out.per_token.iter().sum()));
            }
        }
        enumerated.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        assert_eq!(beam.len(), enumerated.len().min(64));
        for (got, want) in beam.iter().zip(enumerated.iter()) {
            assert_eq!(got.ids, want.0);
            assert!((got.logprob - want.1).abs() < 1e-9);
        }
    }

    #[test]
    fn top_beam_no_worse_than_greedy() {
        for seed in 0..5u64 {
            let mut model = toy_model(11 + seed);
            randomize_head(&mut model, 110 + seed);
            let input = model.vocab.encode("a b c");
            let params = DecodeParams {
                max_tokens: 5,
                min_tokens: 1,
                ..DecodeParams::default()
            };
            let greedy = model
                .generate(
                    &input,
                    &DecodeParams {
                        mode: DecodeMode::Greedy,
                        ..params.clone()
                    },
                )
                .unwrap();
            let beam = model
                .generate(
                    &input,
                    &DecodeParams {
                        mode: DecodeMode::Beam,
                        beam_width: 8,
                        num_return: 1,
                        ..params
                    },
                )
                .unwrap();
            assert!(beam[0].logprob >= greedy[0].logprob - 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let mut model = toy_model(12);
        randomize_head(&mut model, 120);
        let input = model.vocab.encode("a b c");
        let params = DecodeParams {
            mode: DecodeMode::Sample,
            top_k: 4,
            top_p: 0.95,
            max_tokens: 8,
            seed: 99,
            ..DecodeParams::default()
        };
        let a = model.generate(&input, &params).unwrap();
        let b = model.generate(&input, &params).unwrap();
        assert_eq!(a[0].ids, b[0].ids);
        assert_eq!(a[0].logprob.to_bits(), b[0].logprob.to_bits());
    }

    #[test]
    fn min_tokens_masks_eos() {
        let mut model = toy_model(13);
        randomize_head(&mut model, 130);
        // bias the head strongly toward EOS; min_tokens must still hold it back
        let slot = model.params.slot("out_b");
        model.params.get_mut(slot).data[EOS as usize] = 8.0;
        let input = model.vocab.encode("a");
        let out = model
            .generate(
                &input,
                &DecodeParams {
                    mode: DecodeMode::Greedy,
                    min_tokens: 3,
                    max_tokens: 6,
                    ..DecodeParams::default()
                },
            )
            .unwrap();
        assert!(out[0].ids.len() >= 3);
        assert!(out[0].ended_with_eos);
    }

    #[test]
    fn invalid_decode_params_rejected() {
        let model = toy_model(14);
        let input = model.vocab.encode("a");
        let bad = DecodeParams {
            mode: DecodeMode::Beam,
            beam_width: 2,
            num_return: 5,
            ..DecodeParams::default()
        };
        assert!(model.generate(&input, &bad).is_err());
        let bad = DecodeParams {
            min_tokens: 9,
            max_tokens: 3,
            ..DecodeParams::default()
        };
        assert!(model.generate(&input, &bad).is_err());
    }

    #[test]
    fn gradient_of_mean_logprob_matches_finite_differences() {
        let mut model = toy_model(15);
        randomize_head(&mut model, 150);
        let input = model.vocab.encode("a b c");
        let target = model.vocab.encode("d e");

        let eval = |params: &ParamStore| -> (Tape, crate::tape::Var) {
            let mut tape = Tape::new();
            let enc = transformer::encode_on_tape(&mut tape, params, &model.config, &input);
            let dec_in = transformer::shift_right(&target);
            let out = transformer::decode_on_tape(&mut tape, params, &model.config, enc, &dec_in);
            let idx: Vec<usize> = target.iter().map(|&t| t as usize).collect();
            let picked = tape.pick_per_row(out.logp, &idx);
            let total = tape.sum_all(picked);
            let mean = tape.scale_by(total, 1.0 / target.len() as f64);
            (tape, mean)
        };

        let (tape, loss) = eval(&model.params);
        let grads = tape.backward(loss, &model.params);

        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 25 {
            let slot = rng.gen_range(0..model.params.len());
            let len = model.params.get(slot).data.len();
            let k = rng.gen_range(0..len);
            let analytic = grads.get(slot).map_or(0.0, |g| g.data[k]);
            let mut plus = model.params.clone();
            plus.get_mut(slot).data[k] += h;
            let mut minus = model.params.clone();
            minus.get_mut(slot).data[k] -= h;
            let (tp, lp) = eval(&plus);
            let (tm, lm) = eval(&minus);
            let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "slot {slot} elem {k}: analytic {analytic} vs fd {fd}"
            );
            checked += 1;
        }
    }

    #[test]
    fn copy_task_loss_halves_in_fifty_steps() {
        // targets repeat the first three input tokens; the model should fit
        // this quickly from scratch
        let mut model = toy_model(16);
        let mut opt = Adam::new(&model.params, 5e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1717);
        let letters = ["a", "b", "c", "d", "e", "f", "g", "h"];
        let examples: Vec<(Vec<u32>, Vec<u32>)> = (0..10)
            .map(|_| {
                let words: Vec<&str> = (0..6).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
                let input = model.vocab.encode(&words.join(" "));
                let mut target = input[..3.min(input.len())].to_vec();
                target.push(EOS);
                (input, target)
            })
            .collect();

        let loss_of = |model: &SeqModel, input: &[u32], target: &[u32]| -> (Tape, crate::tape::Var) {
            let mut tape = Tape::new();
            let enc = transformer::encode_on_tape(&mut tape, &model.params, &model.config, input);
            let dec_in = transformer::shift_right(target);
            let out = transformer::decode_on_tape(&mut tape, &model.params, &model.config, enc, &dec_in);
            let idx: Vec<usize> = target.iter().map(|&t| t as usize).collect();
            let picked = tape.pick_per_row(out.logp, &idx);
            let total = tape.sum_all(picked);
            let nll = tape.scale_by(total, -1.0 / target.len() as f64);
            (tape, nll)
        };

        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..50 {
            let (input, target) = &examples[step % examples.len()];
            let (tape, loss) = loss_of(&model, input, target);
            let value = model.train_step(&mut opt, &tape, loss).unwrap();
            if step == 0 {
                first = value;
            }
            last = value;
        }
        assert!(
            last <= 0.5 * first,
            "loss went from {first} to {last}, expected at least a 50% drop"
        );
    }

    #[test]
    fn token_sequence_validates_ids() {
        assert!(TokenSequence::new(vec![0, 5, 9], 10).is_ok());
        assert!(TokenSequence::new(vec![0, 10], 10).is_err());
    }
}
