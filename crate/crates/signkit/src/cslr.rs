//! Continuous sign recognition: encoder features, a strided temporal
//! convolution stack, a bidirectional recurrent layer, and per-step gloss
//! scores trained with the alignment-marginal loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{BiLstm, Conv1d, Dropout, Linear, ParamStore, Tape, Var};

use crate::ctc;
use crate::encoder::{ModelConfig, SignEncoder};
use crate::error::{Error, Result};
use crate::pose_data::{sample_frames, KeypointLayout, PoseSequence, SampleMode};
use crate::task::TaskConfig;

const TCN_KERNEL: usize = 5;

pub struct CslrModel {
    pub encoder: SignEncoder,
    conv1: Conv1d,
    conv2: Conv1d,
    bilstm: BiLstm,
    head: Linear,
    /// Gloss classes excluding the blank; scores have this plus one column.
    pub gloss_vocab: usize,
    pub sampled_frames: usize,
}

impl CslrModel {
    pub fn new(
        store: &mut ParamStore,
        model_cfg: ModelConfig,
        layout: &KeypointLayout,
        task_cfg: &TaskConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        task_cfg.validate()?;
        let fused = model_cfg.fused_dim();
        let h = task_cfg.lstm_hidden;
        let [s1, s2] = task_cfg.tcn_strides;
        let encoder = SignEncoder::new(store, model_cfg, layout, rng)?;
        let conv1 = Conv1d::new(store, "cslr.tcn1", fused, h, TCN_KERNEL, s1, TCN_KERNEL / 2, rng);
        let conv2 = Conv1d::new(store, "cslr.tcn2", h, h, TCN_KERNEL, s2, TCN_KERNEL / 2, rng);
        let bilstm = BiLstm::new(store, "cslr.bilstm", h, h, rng);
        let head = Linear::new_zeroed(store, "cslr.head", 2 * h, task_cfg.gloss_vocab + 1);
        Ok(Self {
            encoder,
            conv1,
            conv2,
            bilstm,
            head,
            gloss_vocab: task_cfg.gloss_vocab,
            sampled_frames: task_cfg.sampled_frames,
        })
    }

    /// Temporal length after both convolution strides.
    pub fn reduced_len(&self, t: usize) -> usize {
        self.conv2.out_len(self.conv1.out_len(t))
    }

    /// Per-step gloss scores `[t', gloss_vocab + 1]` (blank in column 0).
    pub fn logits(
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
        let c1 = self.conv1.forward(tape, store, enc.fused);
        let c1 = tape.relu(c1);
        let c2 = self.conv2.forward(tape, store, c1);
        let c2 = tape.relu(c2);
        let rec = self.bilstm.forward(tape, store, c2);
        Ok(self.head.forward(tape, store, rec))
    }

    /// Alignment-marginal loss for one labelled clip. Infeasible targets
    /// (more glosses than reduced frames can emit) surface as
    /// [`Error::Infeasible`] so training can skip the sample.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pose: &PoseSequence,
        labels: &[usize],
        mode: SampleMode,
        rng: &mut ChaCha8Rng,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        if labels.iter().any(|&l| l == ctc::BLANK || l > self.gloss_vocab) {
            return Err(Error::Config(format!(
                "gloss labels must lie in 1..={}",
                self.gloss_vocab
            )));
        }
        let logits = self.logits(tape, store, pose, mode, rng, dropout)?;
        let log_probs = tape.log_softmax_rows(logits);
        ctc::ctc_loss(tape, log_probs, labels)
    }

    /// Beam decoding of one clip into a gloss sequence (deterministic
    /// center sampling, no dropout).
    pub fn decode(&self, store: &ParamStore, pose: &PoseSequence, beam: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits =
            self.logits(&mut tape, store, pose, SampleMode::Center, &mut rng, &mut None)?;
        let log_probs = tape.log_softmax_rows(logits);
        Ok(ctc::ctc_beam_decode(tape.value(log_probs), beam))
    }
}
