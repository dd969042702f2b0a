//! Keypoint layout, pose/text sample types, normalization, frame sampling,
//! and the on-disk corpus format.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joints kept from the 133-point whole-body skeleton.
pub const NUM_JOINTS: usize = 79;
/// Joints per hand in the source skeleton.
pub const HAND_JOINTS: usize = 21;
/// Fractional expansion of each hand bounding box per side.
pub const DEFAULT_HAND_MARGIN: f64 = 0.1;

const POSE_MAGIC: &[u8; 4] = b"SLPS";
const POSE_VERSION: u32 = 1;

/// Body part of a kept joint, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Body,
    Facial,
    Mouth,
    Hands,
}

/// Static description of the 79-joint layout: which source joints are kept,
/// how they group into parts, and the spatial graph over them.
pub struct KeypointLayout {
    pub total_joints: usize,
    /// 0-based indices into the 133-joint source skeleton.
    pub source_indices: Vec<usize>,
    /// Half-open index ranges per part, in kept-joint space.
    pub body: std::ops::Range<usize>,
    pub facial: std::ops::Range<usize>,
    pub mouth: std::ops::Range<usize>,
    pub hands: std::ops::Range<usize>,
    /// Undirected edges (a < b) over kept-joint indices.
    pub skeleton_edges: Vec<(usize, usize)>,
}

impl KeypointLayout {
    /// The standard layout: upper body 1~11, jawline 24~40, nose tip 54,
    /// inner mouth 84~91, both hands 92~133 (1-based source indices).
    pub fn default_79() -> Self {
        let mut source = Vec::with_capacity(NUM_JOINTS);
        source.extend(1..=11);
        source.extend(24..=40);
        source.push(54);
        source.extend(84..=91);
        source.extend(92..=133);
        debug_assert_eq!(source.len(), NUM_JOINTS);
        // Convert the 1-based convention once, at the layout boundary.
        let source_indices: Vec<usize> = source.into_iter().map(|i: usize| i - 1).collect();

        let layout = Self {
            total_joints: NUM_JOINTS,
            source_indices,
            body: 0..11,
            facial: 11..29,
            mouth: 29..37,
            hands: 37..79,
            skeleton_edges: Self::build_edges(),
        };
        layout.validate().expect("default layout is valid");
        layout
    }

    /// Kinematic tree over the kept joints. Within the body: face points and
    /// shoulder/elbow/wrist chains; jawline and inner mouth as chains/rings;
    /// standard five-finger trees per hand; wrists bridge to hand roots.
    fn build_edges() -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = Vec::new();
        // Body: 0 nose, 1/2 eyes, 3/4 ears, 5/6 shoulders, 7/8 elbows,
        // 9/10 wrists.
        e.extend([
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
            (0, 5),
            (0, 6),
            (5, 6),
            (5, 7),
            (7, 9),
            (6, 8),
            (8, 10),
        ]);
        // Jawline chain (kept 11..=27), nose tip 28 attached mid-jaw.
        for i in 11..27 {
            e.push((i, i + 1));
        }
        e.push((19, 28));
        e.push((0, 28));
        // Inner mouth ring (kept 29..=36), attached to the nose tip.
        for i in 29..36 {
            e.push((i, i + 1));
        }
        e.push((29, 36));
        e.push((28, 29));
        // Hands: root then four joints per finger.
        for (root, wrist) in [(37usize, 9usize), (58, 10)] {
            e.push((wrist, root));
            for finger in 0..5 {
                let base = root + 1 + finger * 4;
                e.push((root, base));
                for k in 0..3 {
                    e.push((base + k, base + k + 1));
                }
            }
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_indices.len() != self.total_joints {
            return Err(Error::Layout(format!(
                "{} source indices for {} joints",
                self.source_indices.len(),
                self.total_joints
            )));
        }
        let part_sum = self.body.len() + self.facial.len() + self.mouth.len() + self.hands.len();
        if part_sum != self.total_joints {
            return Err(Error::Layout(format!("part sizes sum to {part_sum}")));
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &self.skeleton_edges {
            if a == b {
                return Err(Error::Layout(format!("self-loop at joint {a}")));
            }
            if a >= self.total_joints || b >= self.total_joints {
                return Err(Error::Layout(format!("edge ({a},{b}) out of range")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::Layout(format!("duplicate edge ({a},{b})")));
            }
        }
        Ok(())
    }

    /// Manual joints: body and hands.
    pub fn manual_set(&self) -> Vec<usize> {
        self.body.clone().chain(self.hands.clone()).collect()
    }

    /// Non-manual joints: facial and mouth.
    pub fn nonmanual_set(&self) -> Vec<usize> {
        self.facial.clone().chain(self.mouth.clone()).collect()
    }

    pub fn part_of(&self, joint: usize) -> Part {
        if self.body.contains(&joint) {
            Part::Body
        } else if self.facial.contains(&joint) {
            Part::Facial
        } else if self.mouth.contains(&joint) {
            Part::Mouth
        } else {
            Part::Hands
        }
    }

    /// Kept-index ranges of the left and right hands.
    pub fn hand_ranges(&self) -> [std::ops::Range<usize>; 2] {
        let start = self.hands.start;
        [start..start + HAND_JOINTS, start + HAND_JOINTS..start + 2 * HAND_JOINTS]
    }
}

/// One sample's 2-D keypoints and per-joint confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    /// `[t, K, 2]` coordinates, image- or normalized-space.
    pub coords: Array3<f64>,
    /// `[t, K]` confidences in [0, 1].
    pub confidence: Array2<f64>,
    pub normalized: bool,
}

impl PoseSequence {
    pub fn new(coords: Array3<f64>, confidence: Array2<f64>, normalized: bool) -> Result<Self> {
        let (t, k, two) = coords.dim();
        if two != 2 || t == 0 {
            return Err(Error::Shape(format!("coords shaped [{t}, {k}, {two}]")));
        }
        if confidence.dim() != (t, k) {
            return Err(Error::Shape(format!(
                "confidence {:?} does not match coords [{t}, {k}]",
                confidence.dim()
            )));
        }
        if confidence.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::Shape("confidence outside [0, 1]".into()));
        }
        Ok(Self { coords, confidence, normalized })
    }

    pub fn num_frames(&self) -> usize {
        self.coords.dim().0
    }

    pub fn num_joints(&self) -> usize {
        self.coords.dim().1
    }

    /// Flattens coordinates to `[t, 2K]` with (x, y) interleaved per joint.
    pub fn coords_flat(&self) -> Array2<f64> {
        let (t, k, _) = self.coords.dim();
        let mut out = Array2::zeros((t, 2 * k));
        for f in 0..t {
            for j in 0..k {
                out[[f, 2 * j]] = self.coords[[f, j, 0]];
                out[[f, 2 * j + 1]] = self.coords[[f, j, 1]];
            }
        }
        out
    }
}

/// Language tag of the paired text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lang {
    ASL,
    BSL,
    CSL,
    GSL,
    SYN,
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Lang::ASL => "ASL",
            Lang::BSL => "BSL",
            Lang::CSL => "CSL",
            Lang::GSL => "GSL",
            Lang::SYN => "SYN",
        };
        f.write_str(s)
    }
}

/// A pose sequence optionally paired with text and gloss supervision.
#[derive(Debug, Clone)]
pub struct SignTextSample {
    pub id: String,
    pub pose: PoseSequence,
    pub text: Option<String>,
    pub lang: Lang,
    pub gloss_labels: Option<Vec<usize>>,
}

impl SignTextSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.text {
            if t.trim().is_empty() {
                return Err(Error::Format {
                    record: self.id.clone(),
                    msg: "text present but empty after trim".into(),
                });
            }
        }
        Ok(())
    }
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub text: Option<String>,
    pub lang: Lang,
    pub pose_file: String,
    pub num_frames: usize,
    /// Extension for recognition supervision; omitted when absent so the
    /// base record format stays untouched.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gloss_labels: Option<Vec<usize>>,
}

/// An on-disk corpus: a root directory plus its parsed manifest.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// Selects the kept joints from a raw `[t, 133, 3]` whole-body estimate,
/// splitting (x, y) from confidence.
pub fn select_keypoints(raw: &Array3<f64>, layout: &KeypointLayout) -> Result<PoseSequence> {
    let (t, j, c) = raw.dim();
    if j != 133 || c != 3 {
        return Err(Error::Layout(format!("expected [t, 133, 3] raw pose, got [{t}, {j}, {c}]")));
    }
    let k = layout.total_joints;
    let mut coords = Array3::zeros((t, k, 2));
    let mut conf = Array2::zeros((t, k));
    for f in 0..t {
        for (out_j, &src_j) in layout.source_indices.iter().enumerate() {
            coords[[f, out_j, 0]] = raw[[f, src_j, 0]];
            coords[[f, out_j, 1]] = raw[[f, src_j, 1]];
            conf[[f, out_j]] = raw[[f, src_j, 2]];
        }
    }
    PoseSequence::new(coords, conf, false)
}

/// Hand-frames that fell back to frame-size normalization because the hand
/// box was degenerate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizationMeta {
    /// (frame index, hand index 0=left 1=right) pairs.
    pub degenerate_hands: Vec<(usize, usize)>,
}

/// Maps each hand's joints into [0,1]^2 via that hand's per-frame bounding
/// box (expanded by `margin` per side); all other joints are divided by the
/// frame size. Output coordinates are clamped to [0,1].
pub fn normalize_pose(
    p: &PoseSequence,
    frame_size: (f64, f64),
    layout: &KeypointLayout,
    margin: f64,
) -> Result<(PoseSequence, NormalizationMeta)> {
    let (w, h) = frame_size;
    if p.normalized {
        return Err(Error::Shape("pose already normalized".into()));
    }
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::Shape(format!("frame size {w}x{h}")));
    }
    let t = p.num_frames();
    let mut coords = p.coords.clone();
    let mut meta = NormalizationMeta::default();
    let hand_ranges = layout.hand_ranges();

    for f in 0..t {
        // Default: whole-frame normalization for every joint.
        for j in 0..p.num_joints() {
            coords[[f, j, 0]] = p.coords[[f, j, 0]] / w;
            coords[[f, j, 1]] = p.coords[[f, j, 1]] / h;
        }
        // Hands: per-frame tight box, expanded, then affine to [0,1].
        for (hand_idx, range) in hand_ranges.iter().enumerate() {
            let xs: Vec<f64> = range.clone().map(|j| p.coords[[f, j, 0]]).collect();
            let ys: Vec<f64> = range.clone().map(|j| p.coords[[f, j, 1]]).collect();
            let (xmin, xmax) = min_max(&xs);
            let (ymin, ymax) = min_max(&ys);
            let mx = margin * (xmax - xmin);
            let my = margin * (ymax - ymin);
            let (bx0, bx1) = (xmin - mx, xmax + mx);
            let (by0, by1) = (ymin - my, ymax + my);
            if bx1 - bx0 <= 0.0 || by1 - by0 <= 0.0 {
                meta.degenerate_hands.push((f, hand_idx));
                continue;
            }
            for j in range.clone() {
                coords[[f, j, 0]] = (p.coords[[f, j, 0]] - bx0) / (bx1 - bx0);
                coords[[f, j, 1]] = (p.coords[[f, j, 1]] - by0) / (by1 - by0);
            }
        }
    }
    coords.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let out = PoseSequence::new(coords, p.confidence.clone(), true)?;
    Ok((out, meta))
}

fn min_max(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Random,
    Center,
}

/// Returns the frame indices `sample_frames` would select.
pub fn frame_sample_indices(
    t: usize,
    n: usize,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    assert!(t >= 1 && n >= 1);
    (0..n)
        .map(|k| match mode {
            // Midpoint of the k-th of n equal bins over [0, t).
            SampleMode::Center => ((k as f64 + 0.5) * t as f64 / n as f64).floor() as usize,
            SampleMode::Random => {
                // Uniform draw within the k-th bin; bins narrower than one
                // frame collapse to a single repeated index.
                let lo = (k * t) / n;
                let hi = (((k + 1) * t) / n).max(lo + 1);
                rng.random_range(lo..hi)
            }
        })
        .map(|i| i.min(t - 1))
        .collect()
}

/// Reduces (or stretches) a pose sequence to exactly `n` frames.
pub fn sample_frames(
    p: &PoseSequence,
    n: usize,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> PoseSequence {
    let idx = frame_sample_indices(p.num_frames(), n, mode, rng);
    let coords = ndarray::stack(
        Axis(0),
        &idx.iter().map(|&i| p.coords.index_axis(Axis(0), i)).collect::<Vec<_>>(),
    )
    .expect("frame stack");
    let conf = ndarray::stack(
        Axis(0),
        &idx.iter().map(|&i| p.confidence.index_axis(Axis(0), i)).collect::<Vec<_>>(),
    )
    .expect("confidence stack");
    PoseSequence { coords, confidence: conf, normalized: p.normalized }
}

/// Writes one pose file: magic, version, t, K, then t*K*(x, y, confidence)
/// as little-endian float32, row-major.
pub fn save_pose_file(path: &Path, pose: &PoseSequence) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?);
    let werr = |e| Error::io(path.display().to_string(), e);
    let (t, k, _) = pose.coords.dim();
    w.write_all(POSE_MAGIC).map_err(werr)?;
    w.write_all(&POSE_VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&(t as u32).to_le_bytes()).map_err(werr)?;
    w.write_all(&(k as u32).to_le_bytes()).map_err(werr)?;
    for f in 0..t {
        for j in 0..k {
            for v in [pose.coords[[f, j, 0]], pose.coords[[f, j, 1]], pose.confidence[[f, j]]] {
                w.write_all(&(v as f32).to_le_bytes()).map_err(werr)?;
            }
        }
    }
    w.flush().map_err(werr)
}

/// Reads a pose file written by [`save_pose_file`]. The normalized flag is
/// re-derived: true when every coordinate lies in [0,1].
pub fn load_pose_file(path: &Path, record_id: &str) -> Result<PoseSequence> {
    let mut r =
        BufReader::new(File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?);
    let ferr = |msg: String| Error::Format { record: record_id.to_string(), msg };
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|e| ferr(format!("short header: {e}")))?;
    if &buf4 != POSE_MAGIC {
        return Err(ferr(format!("bad magic {buf4:?}")));
    }
    let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| Error::Format { record: record_id.to_string(), msg: e.to_string() })?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut r)?;
    if version != POSE_VERSION {
        return Err(ferr(format!("unsupported version {version}")));
    }
    let t = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    if t == 0 || k == 0 {
        return Err(ferr(format!("degenerate shape [{t}, {k}]")));
    }
    let mut data = vec![0u8; t * k * 3 * 4];
    r.read_exact(&mut data).map_err(|e| ferr(format!("short payload: {e}")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| ferr(e.to_string()))? != 0 {
        return Err(ferr("trailing bytes after payload".into()));
    }
    let mut coords = Array3::zeros((t, k, 2));
    let mut conf = Array2::zeros((t, k));
    let mut off = 0;
    let mut next = || {
        let v = f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64;
        off += 4;
        v
    };
    for f in 0..t {
        for j in 0..k {
            coords[[f, j, 0]] = next();
            coords[[f, j, 1]] = next();
            conf[[f, j]] = next();
        }
    }
    let normalized = coords.iter().all(|&v| (0.0..=1.0).contains(&v));
    PoseSequence::new(coords, conf, normalized)
}

/// Writes all samples under `root` (pose files in `poses/`, manifest at
/// `manifest.jsonl`) and returns the manifest.
pub fn save_corpus(samples: &[SignTextSample], root: &Path) -> Result<CorpusManifest> {
    let poses_dir = root.join("poses");
    fs::create_dir_all(&poses_dir).map_err(|e| Error::io(poses_dir.display().to_string(), e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let rel = format!("poses/{}.slps", s.id);
        save_pose_file(&root.join(&rel), &s.pose)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            text: s.text.clone(),
            lang: s.lang,
            pose_file: rel,
            num_frames: s.pose.num_frames(),
            gloss_labels: s.gloss_labels.clone(),
        });
    }
    let manifest_path = root.join("manifest.jsonl");
    let mut w = BufWriter::new(
        File::create(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?,
    );
    for rec in &records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(CorpusManifest { root: root.to_path_buf(), records })
}

/// Parses `manifest.jsonl` under `root` without loading pose payloads.
pub fn read_manifest(root: &Path) -> Result<CorpusManifest> {
    let path = root.join("manifest.jsonl");
    let file = File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            record: format!("manifest line {}", lineno + 1),
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(CorpusManifest { root: root.to_path_buf(), records })
}

/// Loads every sample in the manifest, validating shape against the layout.
pub fn load_corpus(manifest: &CorpusManifest, layout: &KeypointLayout) -> Result<Vec<SignTextSample>> {
    let mut samples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let path = manifest.root.join(&rec.pose_file);
        if !path.exists() {
            return Err(Error::Format {
                record: rec.id.clone(),
                msg: format!("pose file missing: {}", rec.pose_file),
            });
        }
        let pose = load_pose_file(&path, &rec.id)?;
        if pose.num_frames() != rec.num_frames {
            return Err(Error::Format {
                record: rec.id.clone(),
                msg: format!(
                    "manifest says {} frames, file has {}",
                    rec.num_frames,
                    pose.num_frames()
                ),
            });
        }
        if pose.num_joints() != layout.total_joints {
            return Err(Error::Format {
                record: rec.id.clone(),
                msg: format!("{} joints, layout wants {}", pose.num_joints(), layout.total_joints),
            });
        }
        let sample = SignTextSample {
            id: rec.id.clone(),
            pose,
            text: rec.text.clone(),
            lang: rec.lang,
            gloss_labels: rec.gloss_labels.clone(),
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}
