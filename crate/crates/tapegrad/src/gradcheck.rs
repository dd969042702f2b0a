//! Central finite-difference validation of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error per coordinate.
    pub rel_tol: f64,
    /// Absolute differences below this floor pass regardless of ratio.
    pub abs_tol: f64,
    /// Coordinates sampled per parameter tensor (all, if the tensor is
    /// smaller).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, rel_tol: 1e-4, abs_tol: 1e-8, samples_per_param: 8, seed: 0x5eed }
    }
}

#[derive(Debug, Clone)]
pub struct CoordFailure {
    pub param: String,
    pub coord: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CoordFailure>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Validates analytic gradients of a scalar loss against central finite
/// differences.
///
/// `forward` must be a pure function of the store (any randomness fixed
/// outside the closure), returning the scalar loss node it built on the
/// given tape. A sampled subset of coordinates of every non-frozen
/// parameter is perturbed by ±eps.
pub fn check_loss_gradients<F>(
    store: &mut ParamStore,
    cfg: &GradCheckConfig,
    mut forward: F,
) -> GradCheckReport
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store);
    assert_eq!(tape.shape(loss), (1, 1), "gradcheck loss must be scalar");
    let mut grads = tape.backward(loss);
    store.accumulate(&tape, &mut grads);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, p)| (id, p.name.clone(), p.value.dim()))
        .collect();

    let mut coords_checked = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut failures = Vec::new();

    for (id, name, (r, c)) in ids {
        let total = r * c;
        let picks: Vec<usize> = if total <= cfg.samples_per_param {
            (0..total).collect()
        } else {
            rand::seq::index::sample(&mut rng, total, cfg.samples_per_param).into_vec()
        };
        for flat in picks {
            let coord = (flat / c, flat % c);
            let orig = store.value(id)[[coord.0, coord.1]];
            let analytic = store.grad(id)[[coord.0, coord.1]];

            store.value_mut(id)[[coord.0, coord.1]] = orig + cfg.eps;
            let mut tp = Tape::new();
            let vp = forward(&mut tp, store);
            let lp = tp.scalar(vp);
            drop(tp);

            store.value_mut(id)[[coord.0, coord.1]] = orig - cfg.eps;
            let mut tm = Tape::new();
            let vm = forward(&mut tm, store);
            let lm = tm.scalar(vm);
            drop(tm);

            store.value_mut(id)[[coord.0, coord.1]] = orig;

            let numeric = (lp - lm) / (2.0 * cfg.eps);
            let diff = (numeric - analytic).abs();
            let denom = numeric.abs().max(analytic.abs());
            let rel = if denom > 0.0 { diff / denom } else { 0.0 };
            coords_checked += 1;
            if diff > cfg.abs_tol {
                max_rel_err = max_rel_err.max(rel);
                if rel > cfg.rel_tol {
                    failures.push(CoordFailure {
                        param: name.clone(),
                        coord,
                        analytic,
                        numeric,
                        rel_err: rel,
                    });
                }
            }
        }
    }

    GradCheckReport { coords_checked, max_rel_err, failures }
}
