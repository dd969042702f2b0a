//! Pre-training losses: masked pose reconstruction, fine-grained sign-text
//! similarity, the symmetric contrastive loss, and their weighted sum.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use tapegrad::{Linear, ParamId, ParamStore, Tape, Var};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};

/// Temperature floor: the trainable scalar is clamped here after updates.
pub const TAU_MIN: f64 = 1e-4;
/// Paper default initialization of the temperature.
pub const TAU_INIT: f64 = 0.07;

/// How a pose/text pair is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    /// Softmax-weighted token-window alignment.
    Fine,
    /// Dot product of globally mean-pooled embeddings.
    Coarse,
}

/// Masked reconstruction error: squared coordinate error per masked joint,
/// confidence-weighted, averaged over the masked entries.
///
/// `v_rec`/`target` are `[t, 2K]`; `mask`/`conf` are `[t, K]`. The target is
/// the clean pose and enters as a constant.
pub fn pr_loss(
    tape: &mut Tape,
    v_rec: Var,
    target: &Array2<f64>,
    mask: &Array2<f64>,
    conf: &Array2<f64>,
) -> Result<Var> {
    pr_loss_mode(tape, v_rec, target, mask, conf, true)
}

/// [`pr_loss`] with the normalization switch exposed: `normalized` divides
/// by the masked-entry count, otherwise the raw weighted sum is returned.
pub fn pr_loss_mode(
    tape: &mut Tape,
    v_rec: Var,
    target: &Array2<f64>,
    mask: &Array2<f64>,
    conf: &Array2<f64>,
    normalized: bool,
) -> Result<Var> {
    let (t, k2) = tape.shape(v_rec);
    let (tm, k) = mask.dim();
    if target.dim() != (t, k2) || k2 != 2 * k || tm != t || conf.dim() != (t, k) {
        return Err(Error::Shape(format!(
            "reconstruction loss shapes: rec [{t}, {k2}], mask {:?}, conf {:?}",
            mask.dim(),
            conf.dim()
        )));
    }
    // Per-coordinate weight M*C, repeated for x and y of each joint.
    let mut weight = Array2::zeros((t, k2));
    let mut masked_count = 0usize;
    for f in 0..t {
        for j in 0..k {
            let w = mask[[f, j]] * conf[[f, j]];
            weight[[f, 2 * j]] = w;
            weight[[f, 2 * j + 1]] = w;
            if mask[[f, j]] == 1.0 {
                masked_count += 1;
            }
        }
    }
    let tgt = tape.constant(target.clone());
    let wvar = tape.constant(weight);
    let diff = tape.sub(v_rec, tgt);
    let sq = tape.mul(diff, diff);
    let weighted = tape.mul(sq, wvar);
    let total = tape.sum_all(weighted);
    if normalized {
        Ok(tape.scale(total, 1.0 / masked_count.max(1) as f64))
    } else {
        Ok(total)
    }
}

/// The two projection heads into the shared embedding space.
pub struct Projectors {
    pub sign_l1: Linear,
    pub sign_l2: Linear,
    pub text_l1: Linear,
    pub text_l2: Linear,
    pub pool_s: usize,
}

impl Projectors {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        text_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            sign_l1: Linear::new(store, "proj.sign.l1", cfg.fused_dim(), cfg.d_e, rng),
            sign_l2: Linear::new(store, "proj.sign.l2", cfg.d_e, cfg.d_e, rng),
            text_l1: Linear::new(store, "proj.text.l1", text_dim, cfg.d_e, rng),
            text_l2: Linear::new(store, "proj.text.l2", cfg.d_e, cfg.d_e, rng),
            pool_s: cfg.pool_s,
        }
    }

    /// Temporal mean-pooling (window `s`, partial tail averaged over its
    /// own length) then the sign projector: `[t, d] -> [ceil(t/s), d_e]`.
    pub fn project_sign(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Var {
        let pooled = tape.pool_rows(fused, self.pool_s);
        let h = self.sign_l1.forward(tape, store, pooled);
        let h = tape.gelu(h);
        self.sign_l2.forward(tape, store, h)
    }

    /// Token-wise text projector: `[m, d_t] -> [m, d_e]`.
    pub fn project_text(&self, tape: &mut Tape, store: &ParamStore, text_feats: Var) -> Var {
        let h = self.text_l1.forward(tape, store, text_feats);
        let h = tape.gelu(h);
        self.text_l2.forward(tape, store, h)
    }
}

/// Fine-grained similarity of one pair: rows are L2-normalized, pairwise
/// cosine matrix Z is reweighted by its own row-softmax, and everything is
/// averaged over sign windows.
pub fn fine_grained_similarity(tape: &mut Tape, f_sign: Var, f_text: Var) -> Var {
    let n = tape.shape(f_sign).0;
    let ns = tape.row_l2_normalize(f_sign);
    let nt = tape.row_l2_normalize(f_text);
    let ntt = tape.transpose(nt);
    let z = tape.matmul(ns, ntt);
    let a = tape.softmax_rows(z);
    let zh = tape.mul(a, z);
    let total = tape.sum_all(zh);
    tape.scale(total, 1.0 / n as f64)
}

/// Coarse similarity: cosine of the mean-pooled embeddings.
pub fn coarse_similarity(tape: &mut Tape, f_sign: Var, f_text: Var) -> Var {
    let gs = tape.mean_rows(f_sign);
    let gt = tape.mean_rows(f_text);
    let ns = tape.row_l2_normalize(gs);
    let nt = tape.row_l2_normalize(gt);
    let prod = tape.mul(ns, nt);
    tape.sum_all(prod)
}

/// Assembles the B x B similarity matrix over a batch of projected pairs.
/// Entry (i, j) scores sign i against text j.
pub fn batch_similarity_matrix(
    tape: &mut Tape,
    signs: &[Var],
    texts: &[Var],
    kind: SimilarityKind,
) -> Result<Var> {
    let b = signs.len();
    if b == 0 || texts.len() != b {
        return Err(Error::Shape(format!("batch of {b} signs vs {} texts", texts.len())));
    }
    let mut rows = Vec::with_capacity(b);
    for &s in signs {
        let mut row: Option<Var> = None;
        for &t in texts {
            let m = match kind {
                SimilarityKind::Fine => fine_grained_similarity(tape, s, t),
                SimilarityKind::Coarse => coarse_similarity(tape, s, t),
            };
            row = Some(match row {
                None => m,
                Some(r) => tape.concat_cols(r, m),
            });
        }
        rows.push(row.expect("non-empty row"));
    }
    Ok(tape.concat_rows(&rows))
}

/// Trainable temperature, stored as log-temperature so positivity holds by
/// construction; the floor is enforced by clamping after updates.
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    pub fn new(store: &mut ParamStore) -> Self {
        Self::with_init(store, TAU_INIT)
    }

    /// Starts the temperature at `tau`; the floor still applies afterwards.
    pub fn with_init(store: &mut ParamStore, tau: f64) -> Self {
        let log_tau = store.add("stc.log_tau", Array2::from_elem((1, 1), tau.ln()), false);
        Self { log_tau }
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        store.value(self.log_tau)[[0, 0]].exp()
    }

    /// Enforces the temperature floor; call after every optimizer step.
    pub fn clamp(&self, store: &mut ParamStore) {
        let floor = TAU_MIN.ln();
        let v = &mut store.value_mut(self.log_tau)[[0, 0]];
        if *v < floor {
            *v = floor;
        }
    }
}

/// Symmetric InfoNCE over the batch similarity matrix, computed in log
/// space: mean of row-wise and column-wise cross-entropy at the diagonal.
pub fn stc_loss(tape: &mut Tape, sim_matrix: Var, store: &ParamStore, temp: &Temperature) -> Var {
    let b = tape.shape(sim_matrix).0;
    assert_eq!(tape.shape(sim_matrix), (b, b), "similarity matrix must be square");
    let log_tau = store.use_on(tape, temp.log_tau);
    let tau = tape.exp(log_tau);
    let inv_tau = tape.recip(tau);
    let logits = tape.mul_scalar_var(sim_matrix, inv_tau);
    let diag: Rc<Vec<usize>> = Rc::new((0..b).collect());
    let lsm_rows = tape.log_softmax_rows(logits);
    let diag_r = tape.pick_per_row(lsm_rows, Rc::clone(&diag));
    let sum_r = tape.sum_all(diag_r);
    let logits_t = tape.transpose(logits);
    let lsm_cols = tape.log_softmax_rows(logits_t);
    let diag_c = tape.pick_per_row(lsm_cols, diag);
    let sum_c = tape.sum_all(diag_c);
    let total = tape.add(sum_r, sum_c);
    tape.scale(total, -0.5 / b as f64)
}

/// Joint objective: reconstruction plus `lambda` times the contrastive
/// term.
pub fn total_loss(tape: &mut Tape, l_pr: Var, l_stc: Option<Var>, lambda: f64) -> Var {
    match l_stc {
        Some(stc) => {
            let weighted = tape.scale(stc, lambda);
            tape.add(l_pr, weighted)
        }
        None => l_pr,
    }
}
