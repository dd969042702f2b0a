//! Isolated sign recognition: encoder features, temporal mean pooling, and a
//! single affine classification layer trained with smoothed cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{Dropout, Linear, ParamStore, Tape, Var};

use crate::encoder::{ModelConfig, SignEncoder};
use crate::error::{Error, Result};
use crate::pose_data::{sample_frames, KeypointLayout, PoseSequence, SampleMode};
use crate::task::{smoothed_cross_entropy, TaskConfig};

pub struct IslrModel {
    pub encoder: SignEncoder,
    pub head: Linear,
    pub num_classes: usize,
    pub sampled_frames: usize,
}

impl IslrModel {
    pub fn new(
        store: &mut ParamStore,
        model_cfg: ModelConfig,
        layout: &KeypointLayout,
        task_cfg: &TaskConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        task_cfg.validate()?;
        let fused = model_cfg.fused_dim();
        let encoder = SignEncoder::new(store, model_cfg, layout, rng)?;
        let head = Linear::new_zeroed(store, "islr.head", fused, task_cfg.num_classes);
        Ok(Self {
            encoder,
            head,
            num_classes: task_cfg.num_classes,
            sampled_frames: task_cfg.sampled_frames,
        })
    }

    /// Class scores `[1, num_classes]` for one clip.
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
        let pooled = tape.mean_rows(enc.fused);
        Ok(self.head.forward(tape, store, pooled))
    }

    /// Mean smoothed cross-entropy over a labelled batch.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[(&PoseSequence, usize)],
        smoothing: f64,
        mode: SampleMode,
        rng: &mut ChaCha8Rng,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Shape("empty classification batch".into()));
        }
        let mut rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &(pose, label) in batch {
            if label >= self.num_classes {
                return Err(Error::Config(format!(
                    "label {label} outside {} classes",
                    self.num_classes
                )));
            }
            rows.push(self.logits(tape, store, pose, mode, rng, dropout)?);
            labels.push(label);
        }
        let stacked = tape.concat_rows(&rows);
        Ok(smoothed_cross_entropy(tape, stacked, &labels, smoothing))
    }

    /// Deterministic evaluation scores (center sampling, no dropout).
    pub fn predict(&self, store: &ParamStore, pose: &PoseSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits =
            self.logits(&mut tape, store, pose, SampleMode::Center, &mut rng, &mut None)?;
        Ok(tape.value(logits).row(0).to_vec())
    }
}
