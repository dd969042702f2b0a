//! The sign pose encoder (graph embedding + dual transformer branches) and
//! the pose decoder.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use tapegrad::{
    xavier_uniform, Dropout, Linear, ParamId, ParamStore, PositionalTable, SparseMatrix, Tape,
    TransformerBlock, Var,
};

use crate::error::{Error, Result};
use crate::pose_data::{KeypointLayout, PoseSequence};

/// How per-frame joints become stream embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedKind {
    /// Spatial graph convolutions over the joint graph, then per-part mean.
    Gcn,
    /// A single affine map of each part's flattened coordinates.
    Linear,
}

/// Architecture hyperparameters for the encoder, decoder, and projectors.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Graph embedding width per stream.
    pub d_g: usize,
    /// Manual branch width.
    pub d1: usize,
    /// Non-manual branch width.
    pub d2: usize,
    /// Transformer blocks per branch.
    pub n_blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Shared embedding width for the similarity space.
    pub d_e: usize,
    /// Temporal pooling window for the sign projector.
    pub pool_s: usize,
    /// Positional table length (maximum pose sequence length).
    pub max_len: usize,
    pub gcn_layers: usize,
    pub decoder_hidden: usize,
    pub embed: EmbedKind,
}

impl ModelConfig {
    /// Shrunken widths for fast, fully-tested runs.
    pub fn desk() -> Self {
        Self {
            d_g: 32,
            d1: 64,
            d2: 64,
            n_blocks: 2,
            heads: 4,
            ff_mult: 2,
            dropout: 0.1,
            d_e: 32,
            pool_s: 4,
            max_len: 256,
            gcn_layers: 2,
            decoder_hidden: 128,
            embed: EmbedKind::Gcn,
        }
    }

    /// Published-scale widths; far too large for the test budget but
    /// expressible.
    pub fn paper() -> Self {
        Self {
            d_g: 512,
            d1: 1024,
            d2: 1536,
            n_blocks: 8,
            heads: 8,
            ff_mult: 4,
            dropout: 0.1,
            d_e: 512,
            pool_s: 4,
            max_len: 256,
            gcn_layers: 2,
            decoder_hidden: 2560,
            embed: EmbedKind::Gcn,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.d1 + self.d2
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_g", self.d_g),
            ("d1", self.d1),
            ("d2", self.d2),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("d_e", self.d_e),
            ("pool_s", self.pool_s),
            ("max_len", self.max_len),
            ("decoder_hidden", self.decoder_hidden),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d1 % self.heads != 0 || self.d2 % self.heads != 0 {
            return Err(Error::Config(format!(
                "branch widths {}/{} not divisible by {} heads",
                self.d1, self.d2, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Symmetrically normalized adjacency with self-loops over `n` nodes:
/// D^{-1/2} (A + I) D^{-1/2}.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut degree = vec![1.0f64; n];
    for &(a, b) in edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let mut triplets = Vec::with_capacity(2 * edges.len() + n);
    for i in 0..n {
        triplets.push((i, i, 1.0 / degree[i]));
    }
    for &(a, b) in edges {
        let v = 1.0 / (degree[a] * degree[b]).sqrt();
        triplets.push((a, b, v));
        triplets.push((b, a, v));
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Block-diagonal replication of a square sparse matrix, for running the
/// same graph over every frame in one multiply.
fn block_diag(m: &SparseMatrix, blocks: usize) -> SparseMatrix {
    let n = m.rows();
    let mut triplets = Vec::with_capacity(m.nnz() * blocks);
    for b in 0..blocks {
        for (r, c, v) in m.iter_triplets() {
            triplets.push((b * n + r, b * n + c, v));
        }
    }
    SparseMatrix::from_triplets(n * blocks, n * blocks, &triplets)
}

/// Mean-readout matrix `[t, t*n]` selecting `subset` within each frame.
fn readout_matrix(t: usize, n: usize, subset: &[usize]) -> SparseMatrix {
    let w = 1.0 / subset.len() as f64;
    let mut triplets = Vec::with_capacity(t * subset.len());
    for f in 0..t {
        for &j in subset {
            triplets.push((f, f * n + j, w));
        }
    }
    SparseMatrix::from_triplets(t, t * n, &triplets)
}

type SparsePair = (Rc<SparseMatrix>, Rc<SparseMatrix>);

/// Graph-convolution embedding over an arbitrary joint graph. Layers are
/// bias-free: `H' = relu(Ã (H W))`, with the frame axis batched through a
/// cached block-diagonal Ã.
pub struct GcnEmbed {
    pub weights: Vec<ParamId>,
    pub num_nodes: usize,
    adj: Rc<SparseMatrix>,
    adj_cache: RefCell<HashMap<usize, SparsePair>>,
}

impl GcnEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_nodes: usize,
        edges: &[(usize, usize)],
        channels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(channels.len() >= 2, "need at least input and output channels");
        let weights = channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                store.add(format!("{name}.l{i}.w"), xavier_uniform(w[0], w[1], rng), true)
            })
            .collect();
        Self {
            weights,
            num_nodes,
            adj: Rc::new(normalized_adjacency(num_nodes, edges)),
            adj_cache: RefCell::new(HashMap::new()),
        }
    }

    fn adj_for(&self, frames: usize) -> SparsePair {
        self.adj_cache
            .borrow_mut()
            .entry(frames)
            .or_insert_with(|| {
                let m = block_diag(&self.adj, frames);
                let mt = Rc::new(m.transpose());
                (Rc::new(m), mt)
            })
            .clone()
    }

    /// `x` is `[t*num_nodes, c_in]`, frame-major; output keeps that shape
    /// with the final channel width.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, frames: usize) -> Var {
        assert_eq!(tape.shape(x).0, frames * self.num_nodes);
        let (adj, adj_t) = self.adj_for(frames);
        let mut h = x;
        for &w in &self.weights {
            let wv = store.use_on(tape, w);
            let hw = tape.matmul(h, wv);
            let agg = tape.sparse_matmul(&adj, &adj_t, hw);
            h = tape.relu(agg);
        }
        h
    }
}

enum Embedder {
    Gcn(GcnEmbed),
    Linear { manual: ParamId, nonmanual: ParamId },
}

/// Output node handles from one encoder forward pass.
pub struct EncoderVars {
    pub manual: Var,
    pub nonmanual: Var,
    pub fused: Var,
}

/// The sign pose encoder: per-frame joint embedding, then two non-shared
/// pre-norm transformer branches over the manual and non-manual streams,
/// concatenated.
pub struct SignEncoder {
    pub cfg: ModelConfig,
    embedder: Embedder,
    manual_set: Vec<usize>,
    nonmanual_set: Vec<usize>,
    num_joints: usize,
    readout_cache: RefCell<HashMap<usize, (SparsePair, SparsePair)>>,
    in_proj_m: Linear,
    in_proj_n: Linear,
    pos_m: PositionalTable,
    pos_n: PositionalTable,
    blocks_m: Vec<TransformerBlock>,
    blocks_n: Vec<TransformerBlock>,
}

impl SignEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: ModelConfig,
        layout: &KeypointLayout,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let manual_set = layout.manual_set();
        let nonmanual_set = layout.nonmanual_set();
        let embedder = match cfg.embed {
            EmbedKind::Gcn => {
                let mut channels = vec![2];
                channels.extend(std::iter::repeat(cfg.d_g).take(cfg.gcn_layers));
                Embedder::Gcn(GcnEmbed::new(
                    store,
                    "encoder.gcn",
                    layout.total_joints,
                    &layout.skeleton_edges,
                    &channels,
                    rng,
                ))
            }
            EmbedKind::Linear => Embedder::Linear {
                manual: store.add(
                    "encoder.lin_embed.manual",
                    xavier_uniform(2 * manual_set.len(), cfg.d_g, rng),
                    true,
                ),
                nonmanual: store.add(
                    "encoder.lin_embed.nonmanual",
                    xavier_uniform(2 * nonmanual_set.len(), cfg.d_g, rng),
                    true,
                ),
            },
        };
        let in_proj_m = Linear::new(store, "encoder.manual.proj", cfg.d_g, cfg.d1, rng);
        let in_proj_n = Linear::new(store, "encoder.nonmanual.proj", cfg.d_g, cfg.d2, rng);
        let pos_m = PositionalTable::new(store, "encoder.manual.pos", cfg.max_len, cfg.d1, rng);
        let pos_n = PositionalTable::new(store, "encoder.nonmanual.pos", cfg.max_len, cfg.d2, rng);
        let blocks_m = (0..cfg.n_blocks)
            .map(|b| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.manual.b{b}"),
                    cfg.d1,
                    cfg.heads,
                    cfg.ff_mult,
                    rng,
                )
            })
            .collect();
        let blocks_n = (0..cfg.n_blocks)
            .map(|b| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.nonmanual.b{b}"),
                    cfg.d2,
                    cfg.heads,
                    cfg.ff_mult,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            cfg,
            embedder,
            manual_set,
            nonmanual_set,
            num_joints: layout.total_joints,
            readout_cache: RefCell::new(HashMap::new()),
            in_proj_m,
            in_proj_n,
            pos_m,
            pos_n,
            blocks_m,
            blocks_n,
        })
    }

    fn readouts_for(&self, t: usize) -> (SparsePair, SparsePair) {
        self.readout_cache
            .borrow_mut()
            .entry(t)
            .or_insert_with(|| {
                let m = readout_matrix(t, self.num_joints, &self.manual_set);
                let n = readout_matrix(t, self.num_joints, &self.nonmanual_set);
                let mt = Rc::new(m.transpose());
                let nt = Rc::new(n.transpose());
                ((Rc::new(m), mt), (Rc::new(n), nt))
            })
            .clone()
    }

    /// Frame-major `[t*K, 2]` node features from a pose.
    fn node_features(pose: &PoseSequence) -> Array2<f64> {
        let (t, k, _) = pose.coords.dim();
        let mut out = Array2::zeros((t * k, 2));
        for f in 0..t {
            for j in 0..k {
                out[[f * k + j, 0]] = pose.coords[[f, j, 0]];
                out[[f * k + j, 1]] = pose.coords[[f, j, 1]];
            }
        }
        out
    }

    /// Flattened per-part coordinates `[t, 2*|subset|]` for linear embedding.
    fn part_features(pose: &PoseSequence, subset: &[usize]) -> Array2<f64> {
        let t = pose.num_frames();
        let mut out = Array2::zeros((t, 2 * subset.len()));
        for f in 0..t {
            for (i, &j) in subset.iter().enumerate() {
                out[[f, 2 * i]] = pose.coords[[f, j, 0]];
                out[[f, 2 * i + 1]] = pose.coords[[f, j, 1]];
            }
        }
        out
    }

    /// Per-frame joint embedding: `[t, d_g]` per stream.
    pub fn embed_pose(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pose: &PoseSequence,
    ) -> Result<(Var, Var)> {
        if pose.num_joints() != self.num_joints {
            return Err(Error::Layout(format!(
                "pose has {} joints, encoder graph has {}",
                pose.num_joints(),
                self.num_joints
            )));
        }
        let t = pose.num_frames();
        match &self.embedder {
            Embedder::Gcn(gcn) => {
                let x = tape.constant(Self::node_features(pose));
                let h = gcn.forward(tape, store, x, t);
                let ((rm, rmt), (rn, rnt)) = self.readouts_for(t);
                let manual = tape.sparse_matmul(&rm, &rmt, h);
                let nonmanual = tape.sparse_matmul(&rn, &rnt, h);
                Ok((manual, nonmanual))
            }
            Embedder::Linear { manual, nonmanual } => {
                let xm = tape.constant(Self::part_features(pose, &self.manual_set));
                let xn = tape.constant(Self::part_features(pose, &self.nonmanual_set));
                let wm = store.use_on(tape, *manual);
                let wn = store.use_on(tape, *nonmanual);
                Ok((tape.matmul(xm, wm), tape.matmul(xn, wn)))
            }
        }
    }

    /// Runs both branch stacks over stream embeddings and concatenates.
    /// With zero blocks the branches reduce to the input projections
    /// (positional encoding included only when blocks exist).
    pub fn encode_branches(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        manual_emb: Var,
        nonmanual_emb: Var,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<EncoderVars> {
        let t = tape.shape(manual_emb).0;
        if tape.shape(nonmanual_emb).0 != t {
            return Err(Error::Shape("stream lengths differ".into()));
        }
        if t > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {t} exceeds maximum {}",
                self.cfg.max_len
            )));
        }
        let mut m = self.in_proj_m.forward(tape, store, manual_emb);
        let mut n = self.in_proj_n.forward(tape, store, nonmanual_emb);
        if self.cfg.n_blocks > 0 {
            m = self.pos_m.forward(tape, store, m);
            n = self.pos_n.forward(tape, store, n);
            for block in &self.blocks_m {
                m = block.forward(tape, store, m, dropout);
            }
            for block in &self.blocks_n {
                n = block.forward(tape, store, n, dropout);
            }
        }
        let fused = tape.concat_cols(m, n);
        Ok(EncoderVars { manual: m, nonmanual: n, fused })
    }

    /// Full forward pass from a (possibly corrupted) pose.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pose: &PoseSequence,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<EncoderVars> {
        let (m, n) = self.embed_pose(tape, store, pose)?;
        self.encode_branches(tape, store, m, n, dropout)
    }
}

/// Two-layer reconstruction head mapping fused features back to per-joint
/// coordinates `[t, 2K]`.
pub struct PoseDecoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl PoseDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        num_joints: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, "decoder.l1", cfg.fused_dim(), cfg.decoder_hidden, rng),
            l2: Linear::new(store, "decoder.l2", cfg.decoder_hidden, 2 * num_joints, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Var {
        let h = self.l1.forward(tape, store, fused);
        let h = tape.gelu(h);
        self.l2.forward(tape, store, h)
    }
}
