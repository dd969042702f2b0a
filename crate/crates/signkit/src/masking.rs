//! Hierarchical random masking and input corruption for masked pose
//! modeling.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose_data::PoseSequence;

/// Provenance of a masked entry.
pub const LEVEL_NONE: u8 = 0;
pub const LEVEL_JOINT: u8 = 1;
pub const LEVEL_FRAME: u8 = 2;
pub const LEVEL_CLIP: u8 = 3;

/// Corruption applied to a masked entry.
pub const CORRUPT_NONE: u8 = 0;
pub const CORRUPT_ZERO: u8 = 1;
pub const CORRUPT_JITTER: u8 = 2;
pub const CORRUPT_KEEP: u8 = 3;

#[derive(Debug, Clone)]
pub struct MaskConfig {
    pub ratio: f64,
    /// Budget split across clip / frame / joint levels.
    pub level_props: [f64; 3],
    /// Mixture over zero / jitter / keep corruption per masked unit.
    pub corruption_probs: [f64; 3],
    pub jitter_std: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            level_props: [0.25, 0.25, 0.50],
            corruption_probs: [0.8, 0.1, 0.1],
            jitter_std: 0.05,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.ratio)));
        }
        for (name, probs) in
            [("level_props", &self.level_props), ("corruption_probs", &self.corruption_probs)]
        {
            if probs.iter().any(|&p| p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} must be a distribution")));
            }
        }
        if self.jitter_std < 0.0 {
            return Err(Error::Config("jitter_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// The mask M over (frame, joint), plus per-entry provenance and corruption
/// policy.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    /// `[t, K]`, 1.0 = masked.
    pub mask: Array2<f64>,
    /// `[t, K]` level tags (LEVEL_*).
    pub level_tags: Array2<u8>,
    /// `[t, K]` corruption outcomes (CORRUPT_*), set only where masked.
    pub corruption: Array2<u8>,
}

impl MaskPlan {
    pub fn masked_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

/// Plans a mask of roughly `cfg.ratio * t * K` entries, split across three
/// levels: contiguous clip spans (all joints per frame), whole single
/// frames, and individual joints. Lower levels absorb rounding remainders
/// so the total budget is honored.
pub fn plan_mask(t: usize, k: usize, cfg: &MaskConfig, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    cfg.validate()?;
    let mut mask = Array2::zeros((t, k));
    let mut level_tags = Array2::from_elem((t, k), LEVEL_NONE);
    let mut corruption = Array2::from_elem((t, k), CORRUPT_NONE);
    let total_budget = (cfg.ratio * (t * k) as f64).round() as usize;
    if total_budget == 0 {
        return Ok(MaskPlan { mask, level_tags, corruption });
    }

    let mut frame_masked = vec![false; t];
    // Units are recorded as entry lists so each unit draws one corruption.
    let mut units: Vec<(u8, Vec<(usize, usize)>)> = Vec::new();

    // Clip level: contiguous spans of whole frames. A span is only placed
    // where every frame is still free, keeping each unit contiguous.
    let clip_frame_target =
        (((cfg.level_props[0] * total_budget as f64) / k as f64).round() as usize).min(t);
    let mut clip_frames = 0;
    let mut attempts = 0;
    while clip_frames < clip_frame_target && attempts < 16 * t.max(1) {
        attempts += 1;
        let max_span = (t / 8).clamp(2, 6);
        let want = rng.random_range(2..=max_span).min(clip_frame_target - clip_frames);
        let start = rng.random_range(0..=(t - want));
        if (start..start + want).any(|f| frame_masked[f]) {
            continue;
        }
        let mut entries = Vec::with_capacity(want * k);
        for f in start..start + want {
            frame_masked[f] = true;
            clip_frames += 1;
            for j in 0..k {
                entries.push((f, j));
            }
        }
        units.push((LEVEL_CLIP, entries));
    }

    // Frame level: single whole frames among those still unmasked.
    let frame_target =
        (((cfg.level_props[1] * total_budget as f64) / k as f64).round() as usize).min(t);
    let mut free_frames: Vec<usize> = (0..t).filter(|&f| !frame_masked[f]).collect();
    partial_shuffle(&mut free_frames, frame_target, rng);
    for &f in free_frames.iter().take(frame_target) {
        frame_masked[f] = true;
        units.push((LEVEL_FRAME, (0..k).map(|j| (f, j)).collect()));
    }

    // Apply frame-granular units to the mask before computing the joint
    // remainder.
    for (tag, entries) in &units {
        for &(f, j) in entries {
            mask[[f, j]] = 1.0;
            level_tags[[f, j]] = *tag;
        }
    }

    // Joint level: the remaining budget as individual (frame, joint) picks.
    let used = mask.sum() as usize;
    let joint_target = total_budget.saturating_sub(used);
    let mut free: Vec<(usize, usize)> = Vec::with_capacity(t * k - used);
    for f in 0..t {
        if frame_masked[f] {
            continue;
        }
        for j in 0..k {
            free.push((f, j));
        }
    }
    let take = joint_target.min(free.len());
    partial_shuffle(&mut free, take, rng);
    for &(f, j) in free.iter().take(take) {
        mask[[f, j]] = 1.0;
        level_tags[[f, j]] = LEVEL_JOINT;
        units.push((LEVEL_JOINT, vec![(f, j)]));
    }

    // One corruption draw per unit, shared by every entry of the unit.
    for (_, entries) in &units {
        let r: f64 = rng.random();
        let c = if r < cfg.corruption_probs[0] {
            CORRUPT_ZERO
        } else if r < cfg.corruption_probs[0] + cfg.corruption_probs[1] {
            CORRUPT_JITTER
        } else {
            CORRUPT_KEEP
        };
        for &(f, j) in entries {
            corruption[[f, j]] = c;
        }
    }

    Ok(MaskPlan { mask, level_tags, corruption })
}

/// First-`take` Fisher-Yates pass: the prefix becomes a uniform sample
/// without replacement.
fn partial_shuffle<T>(items: &mut [T], take: usize, rng: &mut ChaCha8Rng) {
    let n = items.len();
    for i in 0..take.min(n.saturating_sub(1)) {
        let j = rng.random_range(i..n);
        items.swap(i, j);
    }
}

/// Produces the corrupted input: masked entries are zeroed, jittered, or
/// kept per the plan; unmasked entries and all confidences pass through
/// bit-identically.
pub fn apply_corruption(
    p: &PoseSequence,
    plan: &MaskPlan,
    jitter_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PoseSequence> {
    let (t, k, _) = p.coords.dim();
    if plan.mask.dim() != (t, k) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match pose [{t}, {k}]",
            plan.mask.dim()
        )));
    }
    let mut coords = p.coords.clone();
    for f in 0..t {
        for j in 0..k {
            if plan.mask[[f, j]] != 1.0 {
                continue;
            }
            match plan.corruption[[f, j]] {
                CORRUPT_ZERO => {
                    coords[[f, j, 0]] = 0.0;
                    coords[[f, j, 1]] = 0.0;
                }
                CORRUPT_JITTER => {
                    coords[[f, j, 0]] += gauss(rng, jitter_std);
                    coords[[f, j, 1]] += gauss(rng, jitter_std);
                }
                _ => {}
            }
        }
    }
    Ok(PoseSequence { coords, confidence: p.confidence.clone(), normalized: p.normalized })
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
