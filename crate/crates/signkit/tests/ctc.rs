//! Alignment-marginal loss and beam decoding checked against closed forms,
//! full path enumeration, and exhaustive decoding.

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signkit::ctc::{
    collapse_path, ctc_beam_decode, ctc_loss, ctc_loss_enumeration, ctc_loss_value,
    exhaustive_decode, greedy_decode, min_frames, BLANK,
};
use signkit::Error;
use tapegrad::Tape;

/// Log-probability rows from explicit per-frame distributions.
fn log_probs(rows: &[&[f64]]) -> Array2<f64> {
    let t = rows.len();
    let v = rows[0].len();
    let mut out = Array2::zeros((t, v));
    for (i, row) in rows.iter().enumerate() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (k, &p) in row.iter().enumerate() {
            out[[i, k]] = p.ln();
        }
    }
    out
}

fn random_log_probs(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((t, v));
    for i in 0..t {
        let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        for k in 0..v {
            out[[i, k]] = (raw[k] / sum).ln();
        }
    }
    out
}

#[test]
fn loss_matches_two_frame_closed_form() {
    // Single label over two frames: valid paths are (l,l), (l,b), (b,l),
    // so P = 0.4*0.7 + 0.4*0.3 + 0.6*0.7 = 0.82.
    let lp = log_probs(&[&[0.6, 0.4], &[0.3, 0.7]]);
    let (loss, _) = ctc_loss_value(&lp, &[1]).unwrap();
    assert!((loss - 0.19845093872383832).abs() < 1e-12, "got {loss}");
}

#[test]
fn loss_matches_three_frame_repeat_closed_form() {
    // A repeated label needs a separating blank: the only 3-frame path for
    // [1, 1] is (l, b, l), so P = 0.4 * 0.3 * 0.8.
    let lp = log_probs(&[&[0.6, 0.4], &[0.3, 0.7], &[0.2, 0.8]]);
    let (loss, _) = ctc_loss_value(&lp, &[1, 1]).unwrap();
    assert!((loss - 2.3434070875143007).abs() < 1e-12, "got {loss}");
}

#[test]
fn loss_matches_full_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..60 {
        let t = rng.random_range(2..=6);
        let v = rng.random_range(2..=4);
        let max_len = t.min(3);
        let len = rng.random_range(1..=max_len);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
        if min_frames(&labels) > t {
            continue;
        }
        let lp = random_log_probs(t, v, &mut rng);
        let (lattice, _) = ctc_loss_value(&lp, &labels).unwrap();
        let brute = ctc_loss_enumeration(&lp, &labels).unwrap();
        assert!(
            (lattice - brute).abs() < 1e-9,
            "case {case}: lattice {lattice} vs enumeration {brute}"
        );
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels = [1, 2, 1];
    let mut lp = random_log_probs(6, 4, &mut rng);
    let (_, grad) = ctc_loss_value(&lp, &labels).unwrap();
    let eps = 1e-6;
    for i in 0..6 {
        for k in 0..4 {
            let orig = lp[[i, k]];
            lp[[i, k]] = orig + eps;
            let up = ctc_loss_value(&lp, &labels).unwrap().0;
            lp[[i, k]] = orig - eps;
            let down = ctc_loss_value(&lp, &labels).unwrap().0;
            lp[[i, k]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            assert!(
                (grad[[i, k]] - numeric).abs() < 1e-6,
                "grad[{i},{k}] {} vs fd {numeric}",
                grad[[i, k]]
            );
        }
    }
}

#[test]
fn tape_loss_backpropagates_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let lp = random_log_probs(4, 3, &mut rng);
    let (expected_loss, expected_grad) = ctc_loss_value(&lp, &[1, 2]).unwrap();
    let mut tape = Tape::new();
    let leaf = tape.leaf(lp);
    let loss = ctc_loss(&mut tape, leaf, &[1, 2]).unwrap();
    assert!((tape.scalar(loss) - expected_loss).abs() < 1e-12);
    let grads = tape.backward(loss);
    let g = grads.get(leaf).unwrap();
    assert_eq!(g, &expected_grad);
}

#[test]
fn loss_rejects_bad_labels_and_short_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let lp = random_log_probs(3, 3, &mut rng);
    assert!(ctc_loss_value(&lp, &[]).is_err());
    assert!(ctc_loss_value(&lp, &[BLANK]).is_err());
    assert!(ctc_loss_value(&lp, &[3]).is_err());
    match ctc_loss_value(&lp, &[1, 1, 2]) {
        Err(Error::Infeasible { needed, got }) => {
            assert_eq!((needed, got), (4, 3));
        }
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn min_frames_counts_repeat_separators() {
    assert_eq!(min_frames(&[1, 2, 3]), 3);
    assert_eq!(min_frames(&[1, 1]), 3);
    assert_eq!(min_frames(&[2, 2, 2]), 5);
}

#[test]
fn collapse_drops_repeats_then_blanks() {
    assert_eq!(collapse_path(&[0, 1, 1, 0, 1, 2, 2, 0]), vec![1, 1, 2]);
    assert_eq!(collapse_path(&[0, 0, 0]), Vec::<usize>::new());
}

#[test]
fn beam_width_one_equals_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..200 {
        let t = rng.random_range(1..=7);
        let v = rng.random_range(2..=5);
        let lp = random_log_probs(t, v, &mut rng);
        assert_eq!(ctc_beam_decode(&lp, 1), greedy_decode(&lp));
    }
}

#[test]
fn wide_beam_matches_exhaustive_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..120 {
        let t = rng.random_range(1..=5);
        let v = rng.random_range(2..=3);
        let lp = random_log_probs(t, v, &mut rng);
        // A beam wider than the whole state space cannot prune anything.
        let beam = ctc_beam_decode(&lp, 4096);
        let brute = exhaustive_decode(&lp);
        assert_eq!(beam, brute, "case {case}");
    }
}

#[test]
fn one_hot_frames_decode_to_collapsed_argmax() {
    // Near-one-hot rows make the argmax path dominate every alternative.
    let lp = log_probs(&[
        &[0.997, 0.001, 0.001, 0.001],
        &[0.001, 0.997, 0.001, 0.001],
        &[0.001, 0.997, 0.001, 0.001],
        &[0.997, 0.001, 0.001, 0.001],
        &[0.001, 0.001, 0.001, 0.997],
    ]);
    for beam in [1, 2, 8] {
        assert_eq!(ctc_beam_decode(&lp, beam), vec![1, 3]);
    }
}

#[test]
fn loss_is_sensitive_to_label_order() {
    // Frame probabilities aligned with [1, 2]; the reversed labels must
    // score strictly worse.
    let lp = log_probs(&[&[0.1, 0.8, 0.1], &[0.2, 0.1, 0.7]]);
    let (forward, _) = ctc_loss_value(&lp, &[1, 2]).unwrap();
    let (reversed, _) = ctc_loss_value(&lp, &[2, 1]).unwrap();
    assert!(forward < reversed, "forward {forward} vs reversed {reversed}");
}

#[test]
fn beam_decode_empty_on_blank_dominant_input() {
    let lp = log_probs(&[&[0.98, 0.01, 0.01], &[0.98, 0.01, 0.01]]);
    assert_eq!(ctc_beam_decode(&lp, 4), Vec::<usize>::new());
}

#[test]
fn decode_is_deterministic_under_exact_ties() {
    // Two symbols with identical probabilities everywhere: repeated calls
    // must agree on one answer.
    let half = array![[0.5f64.ln(), 0.5f64.ln()], [0.5f64.ln(), 0.5f64.ln()]];
    let first = ctc_beam_decode(&half, 3);
    for _ in 0..5 {
        assert_eq!(ctc_beam_decode(&half, 3), first);
    }
}
