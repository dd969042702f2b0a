//! Procedural sign-text corpus: seeded sinusoid trajectories per gloss,
//! jittered per sample, paired with templated text.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose_data::{
    save_corpus, CorpusManifest, KeypointLayout, Lang, PoseSequence, SignTextSample, NUM_JOINTS,
};

/// Fixed namespace for prototype rngs, so a gloss id alone determines its
/// trajectory in every corpus.
const PROTOTYPE_SEED_BASE: u64 = 0x5159_2053_594e_5448;

/// Below this jitter level, nearest-prototype classification of single-gloss
/// samples is exact (the separability margin of the sinusoid bank).
pub const SEPARABLE_JITTER_MAX: f64 = 0.05;

/// One gloss's canonical motion.
#[derive(Debug, Clone)]
pub struct GlossPrototype {
    pub gloss_id: usize,
    pub name: String,
    pub duration: usize,
    /// `[duration, K, 2]`, coords within [0.05, 0.95].
    pub trajectory: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    /// Gloss vocabulary size G.
    pub vocab_size: usize,
    pub min_glosses: usize,
    pub max_glosses: usize,
    pub jitter_std: f64,
    pub seed: u64,
    /// Text template for single-gloss samples; `{}` is the gloss name.
    pub template: String,
    /// Surface words per gloss. Above 1, each mention draws one of several
    /// names for the same sign, so text supervision is weaker than a label.
    pub synonyms: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            vocab_size: 10,
            min_glosses: 1,
            max_glosses: 1,
            jitter_std: 0.02,
            seed: 7,
            template: "this word is {}".into(),
            synonyms: 1,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("synthesis vocab_size must be >= 2".into()));
        }
        if self.min_glosses < 1 || self.max_glosses < self.min_glosses {
            return Err(Error::Config("bad gloss count range".into()));
        }
        if self.jitter_std < 0.0 {
            return Err(Error::Config("jitter_std must be >= 0".into()));
        }
        if self.synonyms < 1 {
            return Err(Error::Config("synonyms must be >= 1".into()));
        }
        if !self.template.contains("{}") {
            return Err(Error::Config("template needs a {} placeholder".into()));
        }
        Ok(())
    }
}

pub fn gloss_name(gloss_id: usize) -> String {
    format!("g{gloss_id}")
}

/// Surface word for one mention of a gloss; variant 0 is the canonical name.
pub fn surface_name(gloss_id: usize, variant: usize) -> String {
    if variant == 0 {
        gloss_name(gloss_id)
    } else {
        format!("g{gloss_id}v{variant}")
    }
}

/// Parent of every kept joint plus a parents-first visit order, from a
/// breadth-first walk of the skeleton tree rooted at the nose.
fn skeleton_tree() -> (Vec<usize>, Vec<usize>) {
    let layout = KeypointLayout::default_79();
    let mut adj = vec![Vec::new(); layout.total_joints];
    for &(a, b) in &layout.skeleton_edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent = vec![usize::MAX; layout.total_joints];
    let mut order = Vec::with_capacity(layout.total_joints);
    parent[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &v in &adj[u] {
            if parent[v] == usize::MAX {
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    debug_assert_eq!(order.len(), layout.total_joints);
    (parent, order)
}

/// Static rest pose shared by every gloss, so joint positions carry no
/// class information on their own.
fn rest_offsets() -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED_BASE);
    let mut out = Array2::zeros((NUM_JOINTS, 2));
    for j in 0..NUM_JOINTS {
        for axis in 0..2 {
            out[[j, axis]] = rng.random_range(-0.06..0.06);
        }
    }
    out
}

/// Builds the deterministic prototype for one gloss. Motion follows the
/// skeleton tree: each joint rides on its parent's trajectory plus a small
/// seeded sinusoid, so neighbouring joints move coherently and distal joints
/// sweep farthest, the way recorded pose chains do. The amplitude budget
/// (root 0.05, locals 0.03, depth at most 9, rest offsets 0.06) keeps every
/// coordinate inside [0.10, 0.90].
pub fn gloss_prototype(gloss_id: usize) -> GlossPrototype {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED_BASE ^ (gloss_id as u64));
    let duration = rng.random_range(12..=20);
    let (parents, order) = skeleton_tree();
    let rest = rest_offsets();
    let mut trajectory = Array3::zeros((duration, NUM_JOINTS, 2));
    for &j in &order {
        for axis in 0..2 {
            let amp = if j == 0 {
                rng.random_range(0.02..0.05)
            } else {
                rng.random_range(0.008..0.03)
            };
            let freq = rng.random_range(1..=3) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for f in 0..duration {
                let x = f as f64 / duration as f64;
                let local = amp * (std::f64::consts::TAU * freq * x + phase).sin();
                let base =
                    if j == 0 { 0.5 } else { trajectory[[f, parents[j], axis]] };
                trajectory[[f, j, axis]] = base + local;
            }
        }
    }
    for f in 0..duration {
        for j in 0..NUM_JOINTS {
            for axis in 0..2 {
                trajectory[[f, j, axis]] += rest[[j, axis]];
            }
        }
    }
    debug_assert!(trajectory.iter().all(|&v| (0.05..=0.95).contains(&v)));
    GlossPrototype { gloss_id, name: gloss_name(gloss_id), duration, trajectory }
}

pub fn build_prototypes(vocab_size: usize) -> Vec<GlossPrototype> {
    (0..vocab_size).map(gloss_prototype).collect()
}

/// Deterministic per-sample rng derived from the corpus seed and position.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Concatenates the named prototypes, adds i.i.d. Gaussian jitter, and sets
/// each joint's confidence to 1 - clamp(jitter magnitude, 0, 0.5).
pub fn synthesize_sample(
    cfg: &SynthesisConfig,
    protos: &[GlossPrototype],
    gloss_ids: &[usize],
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<SignTextSample> {
    for &g in gloss_ids {
        if g >= protos.len() {
            return Err(Error::Config(format!("unknown gloss id {g}")));
        }
    }
    let total: usize = gloss_ids.iter().map(|&g| protos[g].duration).sum();
    let mut coords = Array3::zeros((total, NUM_JOINTS, 2));
    let mut conf = Array2::zeros((total, NUM_JOINTS));
    let mut row = 0;
    for &g in gloss_ids {
        let proto = &protos[g];
        for f in 0..proto.duration {
            for j in 0..NUM_JOINTS {
                let ex = sample_gauss(rng, cfg.jitter_std);
                let ey = sample_gauss(rng, cfg.jitter_std);
                coords[[row, j, 0]] = (proto.trajectory[[f, j, 0]] + ex).clamp(0.0, 1.0);
                coords[[row, j, 1]] = (proto.trajectory[[f, j, 1]] + ey).clamp(0.0, 1.0);
                conf[[row, j]] = 1.0 - (ex.hypot(ey)).clamp(0.0, 0.5);
            }
            row += 1;
        }
    }
    // Variant draws come after the pose loop so coordinates are unchanged
    // by the synonym setting, and are skipped entirely when it is 1.
    let words: Vec<String> = gloss_ids
        .iter()
        .map(|&g| {
            let variant =
                if cfg.synonyms > 1 { rng.random_range(0..cfg.synonyms) } else { 0 };
            surface_name(g, variant)
        })
        .collect();
    let text = if words.len() == 1 {
        cfg.template.replace("{}", &words[0])
    } else {
        words.join(" ")
    };
    Ok(SignTextSample {
        id,
        pose: PoseSequence::new(coords, conf, true)?,
        text: Some(text),
        lang: Lang::SYN,
        gloss_labels: Some(gloss_ids.to_vec()),
    })
}

/// Box-Muller Gaussian; avoids pulling a distribution crate into this one.
fn sample_gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates `n_samples` in memory. Sample k < G leads with gloss k, so
/// every gloss is covered once n_samples >= G; remaining slots are drawn
/// uniformly from the vocabulary.
pub fn synthesize_corpus(cfg: &SynthesisConfig, n_samples: usize) -> Result<Vec<SignTextSample>> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let protos = build_prototypes(cfg.vocab_size);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = sample_rng(cfg.seed, i);
        let count = rng.random_range(cfg.min_glosses..=cfg.max_glosses);
        let mut gloss_ids = Vec::with_capacity(count);
        for slot in 0..count {
            if slot == 0 && i < cfg.vocab_size {
                gloss_ids.push(i);
            } else {
                gloss_ids.push(rng.random_range(0..cfg.vocab_size));
            }
        }
        samples.push(synthesize_sample(cfg, &protos, &gloss_ids, format!("syn{i:05}"), &mut rng)?);
    }
    Ok(samples)
}

/// Generates and writes a corpus under `root`.
pub fn build_corpus(cfg: &SynthesisConfig, n_samples: usize, root: &Path) -> Result<CorpusManifest> {
    let samples = synthesize_corpus(cfg, n_samples)?;
    save_corpus(&samples, root)
}

/// Classifies a single-gloss pose by nearest prototype (mean squared
/// coordinate distance); prototypes of a different duration are excluded.
pub fn nearest_prototype(pose: &PoseSequence, protos: &[GlossPrototype]) -> Option<usize> {
    let t = pose.num_frames();
    let mut best: Option<(usize, f64)> = None;
    for p in protos {
        if p.duration != t {
            continue;
        }
        let d2: f64 = pose
            .coords
            .iter()
            .zip(p.trajectory.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if best.map_or(true, |(_, cur)| d2 < cur) {
            best = Some((p.gloss_id, d2));
        }
    }
    best.map(|(g, _)| g)
}
