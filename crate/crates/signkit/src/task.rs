//! Shared fine-tuning task configuration and classification loss.

use ndarray::Array2;
use tapegrad::{Tape, Var};

use crate::error::{Error, Result};

/// The four downstream pipelines built on the pre-trained encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Isolated recognition: one gloss class per clip.
    Islr,
    /// Continuous recognition: gloss sequence transcription.
    Cslr,
    /// Gloss-free translation to spoken-language text.
    Slt,
    /// Sign-text retrieval in both directions.
    Slrt,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "islr" => Ok(Self::Islr),
            "cslr" => Ok(Self::Cslr),
            "slt" => Ok(Self::Slt),
            "slrt" => Ok(Self::Slrt),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected islr, cslr, slt, or slrt)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Islr => "islr",
            Self::Cslr => "cslr",
            Self::Slt => "slt",
            Self::Slrt => "slrt",
        }
    }
}

/// Hyper-parameters shared across the fine-tuning pipelines. Vocabulary
/// sizes are filled in per task; the rest default to the standard recipe.
#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub task: Task,
    /// ISLR class count.
    pub num_classes: usize,
    /// CSLR gloss vocabulary size, excluding the reserved blank.
    pub gloss_vocab: usize,
    /// SLT target vocabulary size.
    pub text_vocab: usize,
    pub label_smoothing: f64,
    /// Learning-rate multiplier applied to the encoder parameter group; 0
    /// freezes the encoder outright.
    pub finetune_rate: f64,
    pub beam_width: usize,
    pub decoder_blocks: usize,
    /// Translation decoder width.
    pub decoder_width: usize,
    /// Hidden size of the recurrent layer in the CSLR head.
    pub lstm_hidden: usize,
    /// Temporal convolution strides in the CSLR head.
    pub tcn_strides: [usize; 2],
    /// Frames drawn from each clip before encoding.
    pub sampled_frames: usize,
    /// Generation length cap for translation.
    pub max_output_len: usize,
}

impl TaskConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            num_classes: 0,
            gloss_vocab: 0,
            text_vocab: 0,
            label_smoothing: 0.2,
            finetune_rate: 0.1,
            beam_width: 4,
            decoder_blocks: 3,
            decoder_width: 64,
            lstm_hidden: 64,
            tcn_strides: [2, 2],
            sampled_frames: 32,
            max_output_len: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        // 0 is admitted so a frozen-encoder audit is expressible.
        if !(0.0..=1.0).contains(&self.finetune_rate) {
            return Err(Error::Config("finetune_rate must lie in [0, 1]".into()));
        }
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        if self.decoder_blocks < 1 || self.decoder_width < 1 || self.lstm_hidden < 1 {
            return Err(Error::Config("decoder sizes must be >= 1".into()));
        }
        if self.tcn_strides.iter().any(|&s| s < 1) {
            return Err(Error::Config("tcn strides must be >= 1".into()));
        }
        if self.sampled_frames < 1 || self.max_output_len < 1 {
            return Err(Error::Config("length settings must be >= 1".into()));
        }
        let needed = match self.task {
            Task::Islr => self.num_classes,
            Task::Cslr => self.gloss_vocab,
            Task::Slt => self.text_vocab,
            Task::Slrt => 1,
        };
        if needed < 1 {
            return Err(Error::Config(format!(
                "task {} needs its vocabulary size set",
                self.task.name()
            )));
        }
        Ok(())
    }
}

/// Mean label-smoothed cross-entropy over logit rows: the target
/// distribution mixes (1-s) on the label with s spread uniformly over all
/// classes.
pub fn smoothed_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
) -> Var {
    let (b, c) = tape.shape(logits);
    assert_eq!(b, targets.len(), "one target per logit row");
    let logp = tape.log_softmax_rows(logits);
    let mut q = Array2::from_elem((b, c), smoothing / c as f64);
    for (i, &t) in targets.iter().enumerate() {
        assert!(t < c, "target {t} out of range for {c} classes");
        q[[i, t]] += 1.0 - smoothing;
    }
    let qv = tape.constant(q);
    let prod = tape.mul(qv, logp);
    let total = tape.sum_all(prod);
    tape.scale(total, -1.0 / b as f64)
}
