//! Shared brute-force oracles and fixtures for the integration tests. Every
//! oracle here is written as plainly as possible, trading speed for
//! obviousness, so it can arbitrate the optimized implementations.
#![allow(dead_code)]

use ndarray::Array2;

/// Minimum edit distance by exhaustive recursion over edit scripts, with no
/// memoization or tabulation; only usable for short sequences.
pub fn exhaustive_edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    if reference.is_empty() {
        return hypothesis.len();
    }
    if hypothesis.is_empty() {
        return reference.len();
    }
    let sub_cost = usize::from(reference[0] != hypothesis[0]);
    let sub = exhaustive_edit_distance(&reference[1..], &hypothesis[1..]) + sub_cost;
    let del = exhaustive_edit_distance(&reference[1..], hypothesis) + 1;
    let ins = exhaustive_edit_distance(reference, &hypothesis[1..]) + 1;
    sub.min(del).min(ins)
}

/// Longest common subsequence length by exhaustive recursion.
pub fn exhaustive_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if a[0] == b[0] {
        1 + exhaustive_lcs(&a[1..], &b[1..])
    } else {
        exhaustive_lcs(&a[1..], b).max(exhaustive_lcs(a, &b[1..]))
    }
}

/// Straight-line fine-grained similarity: normalize rows, cosine matrix,
/// row softmax, reweight, average over sign rows. Four explicit steps with
/// ndarray only.
pub fn straight_line_fine_similarity(f_sign: &Array2<f64>, f_text: &Array2<f64>) -> f64 {
    let norm_rows = |m: &Array2<f64>| {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / n);
        }
        out
    };
    let ns = norm_rows(f_sign);
    let nt = norm_rows(f_text);
    let z = ns.dot(&nt.t());
    let mut total = 0.0;
    for row in z.rows() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        total += row
            .iter()
            .zip(&exps)
            .map(|(&zv, &e)| (e / denom) * zv)
            .sum::<f64>();
    }
    total / z.dim().0 as f64
}

/// Straight-line coarse similarity: cosine of the column means.
pub fn straight_line_coarse_similarity(f_sign: &Array2<f64>, f_text: &Array2<f64>) -> f64 {
    let mean = |m: &Array2<f64>| {
        let (r, c) = m.dim();
        (0..c)
            .map(|j| (0..r).map(|i| m[[i, j]]).sum::<f64>() / r as f64)
            .collect::<Vec<f64>>()
    };
    let gs = mean(f_sign);
    let gt = mean(f_text);
    let dot: f64 = gs.iter().zip(&gt).map(|(a, b)| a * b).sum();
    let na: f64 = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}
