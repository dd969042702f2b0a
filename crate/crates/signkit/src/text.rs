//! Tokenization, vocabulary, and the frozen text encoder.
//!
//! The text encoder runs outside the training tape: its features enter the
//! loss as constant leaves, so no gradient can reach its parameters.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{LayerNorm, ParamStore, PositionalTable, Tape, TransformerBlock};

use crate::error::{Error, Result};
use crate::pose_data::Lang;

/// Token cap including the trailing end and language markers.
pub const MAX_TEXT_TOKENS: usize = 128;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const LANGS: [Lang; 5] = [Lang::ASL, Lang::BSL, Lang::CSL, Lang::GSL, Lang::SYN];

/// Corpus-built token vocabulary with fixed special tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds from corpus texts: specials first, then the sorted unique
    /// tokens (sorting keeps ids independent of input order).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut id_to_token: Vec<String> =
            ["<pad>", "<unk>", "<bos>", "<eos>"].iter().map(|s| s.to_string()).collect();
        id_to_token.extend(LANGS.iter().map(|l| format!("<lang:{l}>")));
        let mut seen: Vec<String> = texts
            .into_iter()
            .flat_map(tokenize)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        id_to_token.append(&mut seen);
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn lang_id(&self, lang: Lang) -> usize {
        self.token_to_id[&format!("<lang:{lang}>")]
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: usize) -> &str {
        self.id_to_token.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Word token ids followed by the end and language markers, capped at
    /// [`MAX_TEXT_TOKENS`] (word tokens are truncated first, with a warning).
    pub fn encode(&self, text: &str, lang: Lang) -> Vec<usize> {
        let mut words = tokenize(text);
        let cap = MAX_TEXT_TOKENS - 2;
        if words.len() > cap {
            log::warn!("text of {} tokens truncated to {cap}", words.len());
            words.truncate(cap);
        }
        let mut ids: Vec<usize> = words.iter().map(|w| self.id_of(w)).collect();
        ids.push(EOS);
        ids.push(self.lang_id(lang));
        ids
    }

    /// Marker ids a generator must never emit: every '<'-prefixed token
    /// except the end marker.
    pub fn non_generable(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| i != EOS && self.id_to_token[i].starts_with('<'))
            .collect()
    }

    /// Inverse of token encoding for generated sequences; specials are
    /// dropped.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token_of(i))
            .filter(|t| !t.starts_with('<'))
            .map(str::to_string)
            .collect()
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Tokens plus their encoded features for one text.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub tokens: Vec<usize>,
    /// `[m, d_t]` features, one row per token.
    pub features: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TextConfig {
    pub d_t: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub n_blocks: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { d_t: 32, heads: 4, ff_mult: 2, n_blocks: 2, seed: 11 }
    }
}

/// Sources of text features; lets a pre-trained encoder replace the
/// built-in one.
pub trait TextFeatureSource {
    fn feature_dim(&self) -> usize;
    fn encode(&self, tokens: &[usize]) -> TextEncoding;
}

/// A small transformer text encoder whose parameters live in their own
/// store, fully frozen: pre-training never touches them.
pub struct TextEncoder {
    store: ParamStore,
    cfg: TextConfig,
    embed: tapegrad::ParamId,
    pos: PositionalTable,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, cfg: TextConfig) -> Result<Self> {
        if cfg.d_t % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} not divisible by {} heads",
                cfg.d_t, cfg.heads
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embed =
            store.add("text.embed", tapegrad::normal_init(vocab_size, cfg.d_t, 0.5, &mut rng), false);
        let pos = PositionalTable::new(&mut store, "text.pos", MAX_TEXT_TOKENS, cfg.d_t, &mut rng);
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                TransformerBlock::new(
                    &mut store,
                    &format!("text.b{b}"),
                    cfg.d_t,
                    cfg.heads,
                    cfg.ff_mult,
                    &mut rng,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "text.final_ln", cfg.d_t);
        store.set_frozen_prefix("text", true);
        Ok(Self { store, cfg, embed, pos, blocks, final_ln })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Byte image of all parameters, for bitwise frozen-state audits.
    pub fn param_fingerprint(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for (_, p) in self.store.iter() {
            bytes.extend(p.name.as_bytes());
            for v in p.value.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }
}

impl TextFeatureSource for TextEncoder {
    fn feature_dim(&self) -> usize {
        self.cfg.d_t
    }

    /// Deterministic forward pass on a throwaway tape; all parameters bind
    /// as constants, and only the feature values leave this function.
    fn encode(&self, tokens: &[usize]) -> TextEncoding {
        assert!(!tokens.is_empty() && tokens.len() <= MAX_TEXT_TOKENS);
        let mut tape = Tape::new();
        let table = self.store.use_on(&mut tape, self.embed);
        let x = tape.rows(table, std::rc::Rc::new(tokens.to_vec()));
        let mut h = self.pos.forward(&mut tape, &self.store, x);
        for block in &self.blocks {
            h = block.forward(&mut tape, &self.store, h, &mut None);
        }
        let out = self.final_ln.forward(&mut tape, &self.store, h);
        TextEncoding { tokens: tokens.to_vec(), features: tape.value(out).clone() }
    }
}
