//! Run configuration: a flat map of dotted keys with typed validation,
//! JSON file loading, command-line overrides, and a content hash recorded
//! in every artifact.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoder::{EmbedKind, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::objectives::SimilarityKind;
use crate::synthetic::SynthesisConfig;
use crate::task::{Task, TaskConfig};
use crate::text::TextConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    UInt,
    Float,
    Bool,
    Str,
    FloatArray,
}

/// Every accepted key with its type. Keys in the `model.` group have no
/// default: the preset supplies values and these act as overrides.
const KNOWN_KEYS: &[(&str, Kind)] = &[
    ("seed", Kind::UInt),
    ("preset", Kind::Str),
    ("epochs", Kind::UInt),
    ("batch_size", Kind::UInt),
    ("optimizer", Kind::Str),
    ("base_lr", Kind::Float),
    ("weight_decay", Kind::Float),
    ("warmup_frac", Kind::Float),
    ("schedule", Kind::Str),
    ("steplr.every", Kind::UInt),
    ("steplr.gamma", Kind::Float),
    ("grad_clip", Kind::Float),
    ("similarity", Kind::Str),
    ("loss.lambda", Kind::Float),
    ("loss.pr_weight", Kind::Float),
    ("loss.pr_normalized", Kind::Bool),
    ("loss.tau_init", Kind::Float),
    ("mask.ratio", Kind::Float),
    ("mask.level_props", Kind::FloatArray),
    ("mask.corruption_probs", Kind::FloatArray),
    ("mask.jitter_std", Kind::Float),
    ("model.embed", Kind::Str),
    ("model.d_g", Kind::UInt),
    ("model.d1", Kind::UInt),
    ("model.d2", Kind::UInt),
    ("model.n_blocks", Kind::UInt),
    ("model.heads", Kind::UInt),
    ("model.ff_mult", Kind::UInt),
    ("model.dropout", Kind::Float),
    ("model.d_e", Kind::UInt),
    ("model.pool_s", Kind::UInt),
    ("model.max_len", Kind::UInt),
    ("model.gcn_layers", Kind::UInt),
    ("model.decoder_hidden", Kind::UInt),
    ("text.d_t", Kind::UInt),
    ("text.heads", Kind::UInt),
    ("text.ff_mult", Kind::UInt),
    ("text.n_blocks", Kind::UInt),
    ("text.seed", Kind::UInt),
    ("synth.vocab_size", Kind::UInt),
    ("synth.num_samples", Kind::UInt),
    ("synth.min_glosses", Kind::UInt),
    ("synth.max_glosses", Kind::UInt),
    ("synth.jitter_std", Kind::Float),
    ("synth.seed", Kind::UInt),
    ("synth.template", Kind::Str),
    ("synth.synonyms", Kind::UInt),
    ("task.label_smoothing", Kind::Float),
    ("task.finetune_rate", Kind::Float),
    ("task.beam_width", Kind::UInt),
    ("task.decoder_blocks", Kind::UInt),
    ("task.decoder_width", Kind::UInt),
    ("task.lstm_hidden", Kind::UInt),
    ("task.tcn_stride1", Kind::UInt),
    ("task.tcn_stride2", Kind::UInt),
    ("task.sampled_frames", Kind::UInt),
    ("task.max_output_len", Kind::UInt),
    ("task.reuse_projectors", Kind::Bool),
    ("eval.split", Kind::Str),
    ("eval.holdout_frac", Kind::Float),
];

fn kind_of(key: &str) -> Option<Kind> {
    KNOWN_KEYS.iter().find(|(k, _)| *k == key).map(|&(_, kind)| kind)
}

fn matches_kind(value: &Value, kind: Kind) -> bool {
    match kind {
        Kind::UInt => value.as_u64().is_some(),
        Kind::Float => value.as_f64().is_some(),
        Kind::Bool => value.is_boolean(),
        Kind::Str => value.is_string(),
        Kind::FloatArray => value
            .as_array()
            .is_some_and(|a| !a.is_empty() && a.iter().all(|v| v.as_f64().is_some())),
    }
}

/// Flat configuration map. Defaults cover the desk-scale recipe; unknown
/// keys are rejected at every entry point.
#[derive(Debug, Clone)]
pub struct RunConfig {
    map: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        put("seed", 7u64.into());
        put("preset", "desk".into());
        put("epochs", 30u64.into());
        put("batch_size", 8u64.into());
        put("optimizer", "adamw".into());
        put("base_lr", 1e-4.into());
        put("weight_decay", 0.01.into());
        put("warmup_frac", 0.1.into());
        put("schedule", "linear".into());
        put("steplr.every", 10u64.into());
        put("steplr.gamma", 0.5.into());
        put("grad_clip", 5.0.into());
        put("similarity", "fine".into());
        put("loss.lambda", 1.0.into());
        put("loss.pr_weight", 1.0.into());
        put("loss.pr_normalized", true.into());
        put("loss.tau_init", 0.07.into());
        put("mask.ratio", 0.4.into());
        put("mask.level_props", serde_json::json!([0.25, 0.25, 0.5]));
        put("mask.corruption_probs", serde_json::json!([0.8, 0.1, 0.1]));
        put("mask.jitter_std", 0.05.into());
        put("text.d_t", 32u64.into());
        put("text.heads", 4u64.into());
        put("text.ff_mult", 2u64.into());
        put("text.n_blocks", 2u64.into());
        put("text.seed", 11u64.into());
        put("synth.vocab_size", 10u64.into());
        put("synth.num_samples", 200u64.into());
        put("synth.min_glosses", 1u64.into());
        put("synth.max_glosses", 1u64.into());
        put("synth.jitter_std", 0.02.into());
        put("synth.seed", 7u64.into());
        put("synth.template", "this word is {}".into());
        put("synth.synonyms", 1u64.into());
        put("task.label_smoothing", 0.2.into());
        put("task.finetune_rate", 0.1.into());
        put("task.beam_width", 4u64.into());
        put("task.decoder_blocks", 3u64.into());
        put("task.decoder_width", 64u64.into());
        put("task.lstm_hidden", 64u64.into());
        put("task.tcn_stride1", 2u64.into());
        put("task.tcn_stride2", 2u64.into());
        put("task.sampled_frames", 32u64.into());
        put("task.max_output_len", 24u64.into());
        put("task.reuse_projectors", true.into());
        put("eval.split", "train".into());
        put("eval.holdout_frac", 0.2.into());
        Self { map }
    }
}

impl RunConfig {
    /// Inserts one key after validating name and type.
    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        let kind = kind_of(key)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        if !matches_kind(&value, kind) {
            return Err(Error::Config(format!(
                "config key '{key}' has the wrong type (got {value})"
            )));
        }
        self.map.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies one `key=value` override; the value is parsed as JSON first
    /// and falls back to a bare string.
    pub fn apply_set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::from(raw));
        self.set_value(key, value)
    }

    /// Loads defaults merged with a JSON object of overrides.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let parsed: Value = serde_json::from_str(&text)?;
        let obj = parsed
            .as_object()
            .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
        let mut cfg = Self::default();
        for (k, v) in obj {
            cfg.set_value(k, v.clone())?;
        }
        Ok(cfg)
    }

    /// Canonical JSON rendering (keys sorted).
    pub fn to_json(&self) -> Value {
        Value::Object(self.map.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    /// Restores a config embedded in an artifact, rejecting unknown keys.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("embedded config must be an object".into()))?;
        let mut cfg = Self::default();
        for (k, v) in obj {
            cfg.set_value(k, v.clone())?;
        }
        Ok(cfg)
    }

    /// Hex digest of the canonical rendering; artifacts record this.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&self.to_json()).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn usize_of(&self, key: &str) -> usize {
        self.map[key].as_u64().expect("validated uint") as usize
    }

    pub fn u64_of(&self, key: &str) -> u64 {
        self.map[key].as_u64().expect("validated uint")
    }

    pub fn f64_of(&self, key: &str) -> f64 {
        self.map[key].as_f64().expect("validated float")
    }

    pub fn bool_of(&self, key: &str) -> bool {
        self.map[key].as_bool().expect("validated bool")
    }

    pub fn str_of(&self, key: &str) -> &str {
        self.map[key].as_str().expect("validated string")
    }

    fn floats_of(&self, key: &str) -> Vec<f64> {
        self.map[key]
            .as_array()
            .expect("validated array")
            .iter()
            .map(|v| v.as_f64().expect("validated float entry"))
            .collect()
    }

    fn opt_usize(&self, key: &str) -> Option<usize> {
        self.map.get(key).map(|v| v.as_u64().expect("validated uint") as usize)
    }

    /// Resolves the encoder configuration: preset base plus any `model.*`
    /// overrides present in the map.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match self.str_of("preset") {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        };
        if let Some(v) = self.map.get("model.embed") {
            m.embed = match v.as_str().expect("validated string") {
                "gcn" => EmbedKind::Gcn,
                "linear" => EmbedKind::Linear,
                other => {
                    return Err(Error::Config(format!("unknown embedding '{other}'")));
                }
            };
        }
        if let Some(x) = self.opt_usize("model.d_g") {
            m.d_g = x;
        }
        if let Some(x) = self.opt_usize("model.d1") {
            m.d1 = x;
        }
        if let Some(x) = self.opt_usize("model.d2") {
            m.d2 = x;
        }
        if let Some(x) = self.opt_usize("model.n_blocks") {
            m.n_blocks = x;
        }
        if let Some(x) = self.opt_usize("model.heads") {
            m.heads = x;
        }
        if let Some(x) = self.opt_usize("model.ff_mult") {
            m.ff_mult = x;
        }
        if let Some(v) = self.map.get("model.dropout") {
            m.dropout = v.as_f64().expect("validated float");
        }
        if let Some(x) = self.opt_usize("model.d_e") {
            m.d_e = x;
        }
        if let Some(x) = self.opt_usize("model.pool_s") {
            m.pool_s = x;
        }
        if let Some(x) = self.opt_usize("model.max_len") {
            m.max_len = x;
        }
        if let Some(x) = self.opt_usize("model.gcn_layers") {
            m.gcn_layers = x;
        }
        if let Some(x) = self.opt_usize("model.decoder_hidden") {
            m.decoder_hidden = x;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn mask_config(&self) -> Result<MaskConfig> {
        let props = self.floats_of("mask.level_props");
        let cprobs = self.floats_of("mask.corruption_probs");
        if props.len() != 3 || cprobs.len() != 3 {
            return Err(Error::Config("mask distributions need 3 entries".into()));
        }
        let cfg = MaskConfig {
            ratio: self.f64_of("mask.ratio"),
            level_props: [props[0], props[1], props[2]],
            corruption_probs: [cprobs[0], cprobs[1], cprobs[2]],
            jitter_std: self.f64_of("mask.jitter_std"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn text_config(&self) -> TextConfig {
        TextConfig {
            d_t: self.usize_of("text.d_t"),
            heads: self.usize_of("text.heads"),
            ff_mult: self.usize_of("text.ff_mult"),
            n_blocks: self.usize_of("text.n_blocks"),
            seed: self.u64_of("text.seed"),
        }
    }

    pub fn synth_config(&self) -> Result<SynthesisConfig> {
        let cfg = SynthesisConfig {
            vocab_size: self.usize_of("synth.vocab_size"),
            min_glosses: self.usize_of("synth.min_glosses"),
            max_glosses: self.usize_of("synth.max_glosses"),
            jitter_std: self.f64_of("synth.jitter_std"),
            seed: self.u64_of("synth.seed"),
            template: self.str_of("synth.template").to_string(),
            synonyms: self.usize_of("synth.synonyms"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Task hyper-parameters with vocabulary sizes still unset.
    pub fn task_config(&self, task: Task) -> TaskConfig {
        let mut t = TaskConfig::new(task);
        t.label_smoothing = self.f64_of("task.label_smoothing");
        t.finetune_rate = self.f64_of("task.finetune_rate");
        t.beam_width = self.usize_of("task.beam_width");
        t.decoder_blocks = self.usize_of("task.decoder_blocks");
        t.decoder_width = self.usize_of("task.decoder_width");
        t.lstm_hidden = self.usize_of("task.lstm_hidden");
        t.tcn_strides = [self.usize_of("task.tcn_stride1"), self.usize_of("task.tcn_stride2")];
        t.sampled_frames = self.usize_of("task.sampled_frames");
        t.max_output_len = self.usize_of("task.max_output_len");
        t
    }

    pub fn similarity_kind(&self) -> Result<SimilarityKind> {
        match self.str_of("similarity") {
            "fine" => Ok(SimilarityKind::Fine),
            "coarse" => Ok(SimilarityKind::Coarse),
            other => Err(Error::Config(format!("unknown similarity '{other}'"))),
        }
    }

    pub fn schedule(&self, total_steps: usize) -> Result<tapegrad::LrSchedule> {
        tapegrad::LrSchedule::from_name(
            self.str_of("schedule"),
            self.f64_of("base_lr"),
            total_steps,
            self.f64_of("warmup_frac"),
            self.usize_of("steplr.every"),
            self.f64_of("steplr.gamma"),
        )
        .map_err(Error::Config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.mask_config()?;
        self.synth_config()?;
        if self.str_of("optimizer") != "adamw" {
            return Err(Error::Config("only the decoupled adaptive optimizer is available".into()));
        }
        self.similarity_kind()?;
        self.schedule(1)?;
        let lambda = self.f64_of("loss.lambda");
        if lambda < 0.0 {
            return Err(Error::Config("loss.lambda must be >= 0".into()));
        }
        let pr_weight = self.f64_of("loss.pr_weight");
        if pr_weight < 0.0 {
            return Err(Error::Config("loss.pr_weight must be >= 0".into()));
        }
        if lambda == 0.0 && pr_weight == 0.0 {
            return Err(Error::Config("loss.lambda and loss.pr_weight cannot both be 0".into()));
        }
        let tau_init = self.f64_of("loss.tau_init");
        if tau_init < crate::objectives::TAU_MIN {
            return Err(Error::Config(format!(
                "loss.tau_init must be >= the temperature floor {}",
                crate::objectives::TAU_MIN
            )));
        }
        match self.str_of("eval.split") {
            "train" | "holdout" => {}
            other => return Err(Error::Config(format!("unknown eval split '{other}'"))),
        }
        let frac = self.f64_of("eval.holdout_frac");
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::Config("eval.holdout_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
