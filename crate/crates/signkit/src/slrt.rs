//! Sign-text retrieval: the contrastive dual-encoder evaluated by ranking
//! candidates in both directions (text-to-video and video-to-text).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{Dropout, ParamStore, Tape, Var};

use crate::encoder::{ModelConfig, SignEncoder};
use crate::error::{Error, Result};
use crate::objectives::{
    batch_similarity_matrix, stc_loss, Projectors, SimilarityKind, Temperature,
};
use crate::pose_data::{sample_frames, KeypointLayout, PoseSequence, SampleMode};
use crate::task::TaskConfig;

pub struct SlrtModel {
    pub encoder: SignEncoder,
    pub projectors: Projectors,
    pub temperature: Temperature,
    pub sampled_frames: usize,
}

/// Retrieval rankings computed in both directions.
#[derive(Debug, Clone)]
pub struct RetrievalRanks {
    /// Rank of the paired text for each video query.
    pub v2t: Vec<usize>,
    /// Rank of the paired video for each text query.
    pub t2v: Vec<usize>,
}

impl SlrtModel {
    pub fn new(
        store: &mut ParamStore,
        model_cfg: ModelConfig,
        layout: &KeypointLayout,
        text_dim: usize,
        task_cfg: &TaskConfig,
        tau_init: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        task_cfg.validate()?;
        let projectors = Projectors::new(store, &model_cfg, text_dim, rng);
        let encoder = SignEncoder::new(store, model_cfg, layout, rng)?;
        let temperature = Temperature::with_init(store, tau_init);
        Ok(Self { encoder, projectors, temperature, sampled_frames: task_cfg.sampled_frames })
    }

    /// Pooled and projected sign embedding rows for one clip.
    pub fn sign_embedding(
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
        Ok(self.projectors.project_sign(tape, store, enc.fused))
    }

    /// Projected text embedding rows from frozen text-encoder features.
    pub fn text_embedding(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text_feats: &Array2<f64>,
    ) -> Var {
        let feats = tape.constant(text_feats.clone());
        self.projectors.project_text(tape, store, feats)
    }

    /// Symmetric contrastive loss over a paired batch.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[(&PoseSequence, &Array2<f64>)],
        kind: SimilarityKind,
        mode: SampleMode,
        rng: &mut ChaCha8Rng,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        if batch.len() < 2 {
            return Err(Error::Shape("contrastive batch needs at least 2 pairs".into()));
        }
        let mut signs = Vec::with_capacity(batch.len());
        let mut texts = Vec::with_capacity(batch.len());
        for &(pose, feats) in batch {
            signs.push(self.sign_embedding(tape, store, pose, mode, rng, dropout)?);
            texts.push(self.text_embedding(tape, store, feats));
        }
        let sim = batch_similarity_matrix(tape, &signs, &texts, kind)?;
        Ok(stc_loss(tape, sim, store, &self.temperature))
    }

    /// Full evaluation similarity matrix (videos in rows, texts in
    /// columns), computed deterministically with center sampling.
    pub fn eval_similarity(
        &self,
        store: &ParamStore,
        pairs: &[(&PoseSequence, &Array2<f64>)],
        kind: SimilarityKind,
    ) -> Result<Array2<f64>> {
        let b = pairs.len();
        if b == 0 {
            return Err(Error::Shape("empty evaluation set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Embeddings are extracted once as plain arrays so the pairwise
        // pass below stays quadratic in b but cheap per cell.
        let mut sign_rows = Vec::with_capacity(b);
        let mut text_rows = Vec::with_capacity(b);
        for &(pose, feats) in pairs {
            let mut tape = Tape::new();
            let s =
                self.sign_embedding(&mut tape, store, pose, SampleMode::Center, &mut rng, &mut None)?;
            sign_rows.push(tape.value(s).clone());
            let mut tape = Tape::new();
            let t = self.text_embedding(&mut tape, store, feats);
            text_rows.push(tape.value(t).clone());
        }
        let mut sim = Array2::zeros((b, b));
        for i in 0..b {
            for j in 0..b {
                let mut tape = Tape::new();
                let s = tape.constant(sign_rows[i].clone());
                let t = tape.constant(text_rows[j].clone());
                let m = match kind {
                    SimilarityKind::Fine => {
                        crate::objectives::fine_grained_similarity(&mut tape, s, t)
                    }
                    SimilarityKind::Coarse => {
                        crate::objectives::coarse_similarity(&mut tape, s, t)
                    }
                };
                sim[[i, j]] = tape.value(m)[[0, 0]];
            }
        }
        Ok(sim)
    }

    /// Ground-truth ranks in both directions from an evaluation matrix.
    pub fn rank_both_directions(sim: &Array2<f64>) -> RetrievalRanks {
        let v2t = crate::metrics::ranks_from_similarity(sim);
        let t2v = crate::metrics::ranks_from_similarity(&sim.t().to_owned());
        RetrievalRanks { v2t, t2v }
    }
}
