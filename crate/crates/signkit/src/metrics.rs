//! Evaluation metrics: word error rate, BLEU, ROUGE-L, top-k accuracy, and
//! retrieval recall/median-rank. All pure functions over token sequences or
//! score vectors.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Edit-distance decomposition of one hypothesis against its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct WerBreakdown {
    /// Percentage: 100 * (S + D + I) / ref_len.
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

/// Levenshtein alignment with unit costs and a backtrace. When several edit
/// scripts share the minimum distance, the breakdown prefers substitutions
/// over deletions over insertions, making it deterministic.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::Shape("wer reference must be non-empty".into()));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dist[i - 1][j] + 1;
            let ins = dist[i][j - 1] + 1;
            dist[i][j] = sub.min(del).min(ins);
        }
    }
    // Backtrace with the fixed preference order: match, then substitution,
    // deletion, insertion.
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins_count) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && dist[i][j] == dist[i - 1][j - 1]
        {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && dist[i][j] == dist[i - 1][j - 1] + 1 {
            s += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && dist[i][j] == dist[i - 1][j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins_count += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown {
        wer: 100.0 * (s + d + ins_count) as f64 / n as f64,
        substitutions: s,
        deletions: d,
        insertions: ins_count,
        ref_len: n,
    })
}

/// Additive smoothing applied to zero clipped-match counts, needed for the
/// short sentences a desk-scale corpus produces.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n: clipped n-gram precision aggregated over all pairs,
/// geometric mean over orders 1..=n, and the brevity penalty.
pub fn bleu(pairs: &[(Vec<String>, Vec<String>)], max_n: usize) -> f64 {
    assert!(max_n >= 1);
    if pairs.iter().all(|(_, hyp)| hyp.is_empty()) {
        return 0.0;
    }
    let mut ref_len = 0usize;
    let mut hyp_len = 0usize;
    let mut matched = vec![0f64; max_n];
    let mut total = vec![0f64; max_n];
    for (reference, hypothesis) in pairs {
        ref_len += reference.len();
        hyp_len += hypothesis.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            let hyp_counts = ngram_counts(hypothesis, n);
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip) as f64;
            }
            total[n - 1] += hyp_counts.values().sum::<usize>() as f64;
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_prec_sum = 0.0;
    for n in 0..max_n {
        let m = if matched[n] > 0.0 { matched[n] } else { BLEU_EPSILON };
        let t = total[n].max(BLEU_EPSILON);
        log_prec_sum += (m / t).ln();
    }
    let geo = (log_prec_sum / max_n as f64).exp();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    (bp * geo).clamp(0.0, 1.0)
}

/// Sentence-level convenience wrapper.
pub fn bleu_sentence(reference: &[String], hypothesis: &[String], max_n: usize) -> f64 {
    bleu(&[(reference.to_vec(), hypothesis.to_vec())], max_n)
}

/// ROUGE-L weighting: F = (1 + b^2) P R / (R + b^2 P) with b = 1.2.
pub const ROUGE_BETA: f64 = 1.2;

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

/// Longest-common-subsequence F-measure between one reference and one
/// hypothesis; both empty yields 0 by convention.
pub fn rouge_l<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(reference, hypothesis) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyMode {
    PerInstance,
    PerClass,
}

/// Top-k accuracy in percent. Per-instance weights every sample equally;
/// per-class averages each class's own accuracy (so rare classes count as
/// much as common ones). Ties in scores resolve by lower class index.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize, mode: AccuracyMode) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let in_top_k = |row: &[f64], label: usize| -> bool {
        // Rank = how many classes strictly beat the label, with index ties
        // resolved toward lower indices.
        let target = row[label];
        let better = row
            .iter()
            .enumerate()
            .filter(|&(c, &s)| s > target || (s == target && c < label))
            .count();
        better < k
    };
    match mode {
        AccuracyMode::PerInstance => {
            let correct = scores
                .iter()
                .zip(labels)
                .filter(|(row, &l)| in_top_k(row, l))
                .count();
            Ok(100.0 * correct as f64 / labels.len() as f64)
        }
        AccuracyMode::PerClass => {
            let mut per_class: HashMap<usize, (usize, usize)> = HashMap::new();
            for (row, &l) in scores.iter().zip(labels) {
                let e = per_class.entry(l).or_insert((0, 0));
                e.1 += 1;
                if in_top_k(row, l) {
                    e.0 += 1;
                }
            }
            let sum: f64 =
                per_class.values().map(|&(c, n)| c as f64 / n as f64).sum();
            Ok(100.0 * sum / per_class.len() as f64)
        }
    }
}

/// Recall-at-K and median rank over a list of 1-based ground-truth ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    /// Lower median of the rank list.
    pub med_r: f64,
}

pub fn retrieval_metrics(ranks: &[usize]) -> Result<RetrievalMetrics> {
    if ranks.is_empty() {
        return Err(Error::Shape("empty rank list".into()));
    }
    if ranks.iter().any(|&r| r < 1) {
        return Err(Error::Shape("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let med_r = sorted[(sorted.len() - 1) / 2] as f64;
    Ok(RetrievalMetrics {
        r_at_1: recall(1),
        r_at_5: recall(5),
        r_at_10: recall(10),
        med_r,
    })
}

/// Ranks every query's ground-truth candidate in a similarity matrix
/// (queries in rows, higher is better). The rank counts strictly better
/// candidates plus those tying at a lower index, so it is deterministic.
pub fn ranks_from_similarity(sim: &ndarray::Array2<f64>) -> Vec<usize> {
    let (q, _) = sim.dim();
    (0..q)
        .map(|i| {
            let target = sim[[i, i]];
            let better = sim
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(c, &s)| s > target || (s == target && c < i))
                .count();
            better + 1
        })
        .collect()
}
