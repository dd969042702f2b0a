//! Gloss-free translation: encoder features projected into a transformer
//! decoder that generates spoken-language token sequences, trained with
//! teacher forcing and decoded by length-normalized beam search.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;
use tapegrad::{
    apply_dropout, normal_init, Dropout, LayerNorm, Linear, MultiHeadAttention, ParamId,
    ParamStore, PositionalTable, Tape, Var,
};

use crate::encoder::{ModelConfig, SignEncoder};
use crate::error::{Error, Result};
use crate::pose_data::{sample_frames, KeypointLayout, PoseSequence, SampleMode};
use crate::task::{smoothed_cross_entropy, TaskConfig};
use crate::text::{BOS, EOS};

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// projected sign features, then the feed-forward sublayer.
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, d, rng),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        dropout: &mut Option<&mut Dropout>,
    ) -> Var {
        let h = self.ln1.forward(tape, store, x);
        let h = self.self_attn.forward_qkv(tape, store, h, h, true, dropout);
        let h = apply_dropout(tape, h, dropout);
        let x = tape.add(x, h);
        let h = self.ln2.forward(tape, store, x);
        let h = self.cross_attn.forward_qkv(tape, store, h, memory, false, dropout);
        let h = apply_dropout(tape, h, dropout);
        let x = tape.add(x, h);
        let h = self.ln3.forward(tape, store, x);
        let h = self.ff1.forward(tape, store, h);
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, store, h);
        let h = apply_dropout(tape, h, dropout);
        tape.add(x, h)
    }
}

/// One decoded sequence with its length-normalized log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Emitted word token ids, end marker excluded.
    pub tokens: Vec<usize>,
    /// True when the length cap cut the sequence before the end marker.
    pub truncated: bool,
    /// Cumulative log-probability divided by emitted length (end marker
    /// included when reached).
    pub score: f64,
}

pub struct SltModel {
    pub encoder: SignEncoder,
    projector: Linear,
    embed: ParamId,
    pos: PositionalTable,
    blocks: Vec<DecoderBlock>,
    final_ln: LayerNorm,
    out: Linear,
    pub vocab_size: usize,
    /// Marker ids generation must never emit (everything but words and the
    /// end marker).
    banned: Vec<usize>,
    pub sampled_frames: usize,
    pub max_output_len: usize,
    pub beam_width: usize,
}

impl SltModel {
    pub fn new(
        store: &mut ParamStore,
        model_cfg: ModelConfig,
        layout: &KeypointLayout,
        task_cfg: &TaskConfig,
        banned_ids: Vec<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        task_cfg.validate()?;
        let d = task_cfg.decoder_width;
        let heads = model_cfg.heads;
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {d} not divisible by {heads} heads"
            )));
        }
        let ff = d * model_cfg.ff_mult;
        let fused = model_cfg.fused_dim();
        let max_len = model_cfg.max_len;
        let vocab = task_cfg.text_vocab;
        let encoder = SignEncoder::new(store, model_cfg, layout, rng)?;
        let projector = Linear::new(store, "slt.proj", fused, d, rng);
        let embed = store.add("slt.embed", normal_init(vocab, d, 0.02, rng), true);
        let pos = PositionalTable::new(store, "slt.pos", max_len, d, rng);
        let blocks = (0..task_cfg.decoder_blocks)
            .map(|i| DecoderBlock::new(store, &format!("slt.b{i}"), d, heads, ff, rng))
            .collect();
        let final_ln = LayerNorm::new(store, "slt.final_ln", d);
        let out = Linear::new_zeroed(store, "slt.out", d, vocab);
        Ok(Self {
            encoder,
            projector,
            embed,
            pos,
            blocks,
            final_ln,
            out,
            vocab_size: vocab,
            banned: banned_ids,
            sampled_frames: task_cfg.sampled_frames,
            max_output_len: task_cfg.max_output_len,
            beam_width: task_cfg.beam_width,
        })
    }

    /// Projected sign memory the decoder cross-attends to.
    fn memory(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pose: &PoseSequence,
        mode: SampleMode,
        rng: &mut ChaCha8Rng,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let sampled = sample_frames(pose, self.sampled_frames, mode, rng);
        let enc = self.encoder.forward(tape, store, &sampled, dropout)?;
        Ok(self.projector.forward(tape, store, enc.fused))
    }

    /// Next-token logits `[m, vocab]` for decoder input ids against a
    /// memory already on the tape.
    fn decode_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input_ids: &[usize],
        memory: Var,
        dropout: &mut Option<&mut Dropout>,
    ) -> Var {
        let table = store.use_on(tape, self.embed);
        let mut x = tape.rows(table, Rc::new(input_ids.to_vec()));
        x = self.pos.forward(tape, store, x);
        for b in &self.blocks {
            x = b.forward(tape, store, x, memory, dropout);
        }
        let x = self.final_ln.forward(tape, store, x);
        self.out.forward(tape, store, x)
    }

    /// Teacher-forced loss: inputs are the start marker plus all but the
    /// last target id; every position predicts the next target token.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pose: &PoseSequence,
        target_ids: &[usize],
        smoothing: f64,
        mode: SampleMode,
        rng: &mut ChaCha8Rng,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        if target_ids.is_empty() {
            return Err(Error::Shape("translation target must be non-empty".into()));
        }
        if let Some(&bad) = target_ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Config(format!(
                "target id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let memory = self.memory(tape, store, pose, mode, rng, dropout)?;
        let mut input = Vec::with_capacity(target_ids.len());
        input.push(BOS);
        input.extend_from_slice(&target_ids[..target_ids.len() - 1]);
        let logits = self.decode_logits(tape, store, &input, memory, dropout);
        Ok(smoothed_cross_entropy(tape, logits, target_ids, smoothing))
    }

    /// Log-probability row over emittable tokens for the next position.
    fn next_log_probs(&self, store: &ParamStore, memory: &Array2<f64>, prefix: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new();
        let mem = tape.constant(memory.clone());
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        let logits = self.decode_logits(&mut tape, store, &input, mem, &mut None);
        let mut last = tape.value(logits).row(input.len() - 1).to_vec();
        for &b in &self.banned {
            last[b] = -1e30;
        }
        let m = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = last.iter().map(|&v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        last.iter().map(|&v| v - log_z).collect()
    }

    /// Length-normalized beam search from one pose. Width 1 coincides with
    /// greedy decoding.
    pub fn generate(&self, store: &ParamStore, pose: &PoseSequence, beam: usize) -> Result<Generated> {
        assert!(beam >= 1, "beam width must be >= 1");
        let memory = {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mem =
                self.memory(&mut tape, store, pose, SampleMode::Center, &mut rng, &mut None)?;
            tape.value(mem).clone()
        };
        struct Hyp {
            tokens: Vec<usize>,
            log_prob: f64,
        }
        let mut live = vec![Hyp { tokens: Vec::new(), log_prob: 0.0 }];
        let mut pool: Vec<Generated> = Vec::new();
        for _ in 0..self.max_output_len {
            let mut extensions: Vec<Hyp> = Vec::new();
            for hyp in &live {
                let lp = self.next_log_probs(store, &memory, &hyp.tokens);
                for (tok, &l) in lp.iter().enumerate() {
                    if l <= -1e29 {
                        continue;
                    }
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    extensions.push(Hyp { tokens, log_prob: hyp.log_prob + l });
                }
            }
            extensions.sort_by(|a, b| {
                b.log_prob
                    .partial_cmp(&a.log_prob)
                    .unwrap()
                    .then(a.tokens.cmp(&b.tokens))
            });
            extensions.truncate(beam);
            live = Vec::new();
            for ext in extensions {
                if *ext.tokens.last().unwrap() == EOS {
                    let emitted = ext.tokens.len();
                    pool.push(Generated {
                        tokens: ext.tokens[..emitted - 1].to_vec(),
                        truncated: false,
                        score: ext.log_prob / emitted as f64,
                    });
                } else {
                    live.push(ext);
                }
            }
            if live.is_empty() {
                break;
            }
        }
        // Anything still live hit the length cap.
        for hyp in live {
            pool.push(Generated {
                tokens: hyp.tokens.clone(),
                truncated: true,
                score: hyp.log_prob / hyp.tokens.len().max(1) as f64,
            });
        }
        pool.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.tokens.len().cmp(&b.tokens.len()))
                .then(a.tokens.cmp(&b.tokens))
        });
        pool.into_iter()
            .next()
            .ok_or_else(|| Error::Shape("beam search produced no hypotheses".into()))
    }

    /// Token-for-token argmax reference decoder.
    pub fn greedy_generate(&self, store: &ParamStore, pose: &PoseSequence) -> Result<Generated> {
        let memory = {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mem =
                self.memory(&mut tape, store, pose, SampleMode::Center, &mut rng, &mut None)?;
            tape.value(mem).clone()
        };
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        for _ in 0..self.max_output_len {
            let lp = self.next_log_probs(store, &memory, &tokens);
            let (tok, &l) = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap();
            log_prob += l;
            if tok == EOS {
                let emitted = tokens.len() + 1;
                return Ok(Generated {
                    tokens,
                    truncated: false,
                    score: log_prob / emitted as f64,
                });
            }
            tokens.push(tok);
        }
        let n = tokens.len().max(1);
        Ok(Generated { tokens, truncated: true, score: log_prob / n as f64 })
    }
}
