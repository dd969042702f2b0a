//! Connectionist temporal classification: marginal-likelihood loss over all
//! monotonic alignments and beam decoding with blank/repeat collapsing.
//!
//! The loss runs the forward-backward recursions off-tape in log space and
//! attaches the exact posterior gradient to the log-probability node, so the
//! dynamic program itself never enters the autodiff graph.

use std::collections::HashMap;

use ndarray::Array2;
use tapegrad::{Tape, Var};

use crate::error::{Error, Result};

/// Reserved blank class; gloss labels start at 1.
pub const BLANK: usize = 0;

const NEG_INF: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        b
    } else if b == NEG_INF {
        a
    } else {
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Minimum number of frames able to emit `labels`: one per label plus one
/// separating blank per adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn validate_inputs(log_probs: &Array2<f64>, labels: &[usize]) -> Result<()> {
    let (t, v) = log_probs.dim();
    if labels.is_empty() {
        return Err(Error::Shape("ctc labels must be non-empty".into()));
    }
    if labels.iter().any(|&l| l == BLANK || l >= v) {
        return Err(Error::Shape(format!(
            "ctc labels must lie in 1..{v} (blank reserved at {BLANK})"
        )));
    }
    let needed = min_frames(labels);
    if t < needed {
        return Err(Error::Infeasible { needed, got: t });
    }
    Ok(())
}

/// Blank-interleaved label sequence: [b, l1, b, l2, ..., lL, b].
fn extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn forward_lattice(lp: &Array2<f64>, ext: &[usize]) -> Array2<f64> {
    let t = lp.dim().0;
    let s = ext.len();
    let mut alpha = Array2::from_elem((t, s), NEG_INF);
    alpha[[0, 0]] = lp[[0, ext[0]]];
    if s > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for i in 1..t {
        for j in 0..s {
            let mut a = alpha[[i - 1, j]];
            if j >= 1 {
                a = log_add(a, alpha[[i - 1, j - 1]]);
            }
            if j >= 2 && ext[j] != BLANK && ext[j] != ext[j - 2] {
                a = log_add(a, alpha[[i - 1, j - 2]]);
            }
            if a != NEG_INF {
                alpha[[i, j]] = a + lp[[i, ext[j]]];
            }
        }
    }
    alpha
}

fn backward_lattice(lp: &Array2<f64>, ext: &[usize]) -> Array2<f64> {
    let t = lp.dim().0;
    let s = ext.len();
    let mut beta = Array2::from_elem((t, s), NEG_INF);
    beta[[t - 1, s - 1]] = lp[[t - 1, ext[s - 1]]];
    if s > 1 {
        beta[[t - 1, s - 2]] = lp[[t - 1, ext[s - 2]]];
    }
    for i in (0..t - 1).rev() {
        for j in 0..s {
            let mut b = beta[[i + 1, j]];
            if j + 1 < s {
                b = log_add(b, beta[[i + 1, j + 1]]);
            }
            if j + 2 < s && ext[j + 2] != BLANK && ext[j + 2] != ext[j] {
                b = log_add(b, beta[[i + 1, j + 2]]);
            }
            if b != NEG_INF {
                beta[[i, j]] = b + lp[[i, ext[j]]];
            }
        }
    }
    beta
}

/// Negative log marginal probability of `labels` under per-frame
/// log-probabilities `log_probs` ([t, V+1], blank at column 0), summed over
/// every valid alignment. Returns the loss value and the gradient with
/// respect to `log_probs` (the negated symbol posterior).
pub fn ctc_loss_value(log_probs: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    validate_inputs(log_probs, labels)?;
    let ext = extended(labels);
    let s = ext.len();
    let alpha = forward_lattice(log_probs, &ext);
    let t = log_probs.dim().0;
    let mut log_p = alpha[[t - 1, s - 1]];
    if s > 1 {
        log_p = log_add(log_p, alpha[[t - 1, s - 2]]);
    }
    if log_p == NEG_INF {
        return Err(Error::Infeasible { needed: min_frames(labels), got: t });
    }
    let beta = backward_lattice(log_probs, &ext);
    // gamma[i][k] = log sum over lattice states j with symbol k of
    // alpha+beta-emission; d loss / d lp[i,k] = -exp(gamma - log_p).
    let mut grad = Array2::zeros(log_probs.dim());
    for i in 0..t {
        let mut per_class: HashMap<usize, f64> = HashMap::new();
        for j in 0..s {
            let contrib = alpha[[i, j]] + beta[[i, j]] - log_probs[[i, ext[j]]];
            if contrib != NEG_INF {
                let e = per_class.entry(ext[j]).or_insert(NEG_INF);
                *e = log_add(*e, contrib);
            }
        }
        for (k, lg) in per_class {
            grad[[i, k]] = -(lg - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// Tape-attached CTC loss: `log_probs_var` must hold log-softmaxed rows.
/// The returned scalar backpropagates the exact alignment posterior.
pub fn ctc_loss(tape: &mut Tape, log_probs_var: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.value(log_probs_var).clone();
    let (loss, grad) = ctc_loss_value(&lp, labels)?;
    Ok(tape.custom_scalar(log_probs_var, loss, grad))
}

/// Brute-force reference: sums the probability of every length-t frame
/// labelling whose collapse (drop repeats, then blanks) equals `labels`.
/// Exponential in t; intended for short sequences only.
pub fn ctc_loss_enumeration(log_probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    validate_inputs(log_probs, labels)?;
    let (t, v) = log_probs.dim();
    let mut total = NEG_INF;
    let mut path = vec![0usize; t];
    loop {
        if collapse_path(&path) == labels {
            let lp: f64 = path.iter().enumerate().map(|(i, &k)| log_probs[[i, k]]).sum();
            total = log_add(total, lp);
        }
        // Odometer increment over the (V+1)^t path space.
        let mut pos = 0;
        loop {
            if pos == t {
                return Ok(-total);
            }
            path[pos] += 1;
            if path[pos] < v {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Removes consecutive repeats, then blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[derive(Clone)]
struct BeamState {
    collapsed: Vec<usize>,
    last: usize,
    score: f64,
}

/// Beam decoding that tracks the highest-probability path per
/// (collapsed prefix, last raw symbol) state; the final answer is the
/// collapse of the best surviving path. Width 1 therefore coincides with
/// greedy per-frame argmax followed by collapsing.
pub fn ctc_beam_decode(log_probs: &Array2<f64>, beam: usize) -> Vec<usize> {
    assert!(beam >= 1, "beam width must be >= 1");
    let (t, v) = log_probs.dim();
    let mut states = vec![BeamState { collapsed: Vec::new(), last: BLANK, score: 0.0 }];
    for i in 0..t {
        let mut next: HashMap<(Vec<usize>, usize), f64> = HashMap::new();
        for st in &states {
            for k in 0..v {
                let mut collapsed = st.collapsed.clone();
                if k != BLANK && k != st.last {
                    collapsed.push(k);
                }
                let score = st.score + log_probs[[i, k]];
                let e = next.entry((collapsed, k)).or_insert(NEG_INF);
                if score > *e {
                    *e = score;
                }
            }
        }
        let mut merged: Vec<BeamState> = next
            .into_iter()
            .map(|((collapsed, last), score)| BeamState { collapsed, last, score })
            .collect();
        // Deterministic order: score descending, then shorter prefix, then
        // lexicographic prefix, then last symbol.
        merged.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.collapsed.len().cmp(&b.collapsed.len()))
                .then(a.collapsed.cmp(&b.collapsed))
                .then(a.last.cmp(&b.last))
        });
        merged.truncate(beam);
        states = merged;
    }
    // States differing only in the trailing raw symbol share a collapse;
    // keep the best score per sequence.
    let mut best: HashMap<Vec<usize>, f64> = HashMap::new();
    for st in states {
        let e = best.entry(st.collapsed).or_insert(NEG_INF);
        if st.score > *e {
            *e = st.score;
        }
    }
    best.into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(seq, _)| seq)
        .unwrap_or_default()
}

/// Per-frame argmax followed by collapsing; the width-1 beam reference.
pub fn greedy_decode(log_probs: &Array2<f64>) -> Vec<usize> {
    let path: Vec<usize> = log_probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .unwrap()
        })
        .collect();
    collapse_path(&path)
}

/// Exhaustive decoding reference: the collapse whose best single path has
/// maximum probability. Exponential in t.
pub fn exhaustive_decode(log_probs: &Array2<f64>) -> Vec<usize> {
    let (t, v) = log_probs.dim();
    let mut best: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut path = vec![0usize; t];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(i, &k)| log_probs[[i, k]]).sum();
        let seq = collapse_path(&path);
        let e = best.entry(seq).or_insert(NEG_INF);
        if lp > *e {
            *e = lp;
        }
        let mut pos = 0;
        loop {
            if pos == t {
                return best
                    .into_iter()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(seq, _)| seq)
                    .unwrap_or_default();
            }
            path[pos] += 1;
            if path[pos] < v {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}
