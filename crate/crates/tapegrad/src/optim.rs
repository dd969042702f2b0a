//! Adaptive optimizer with decoupled weight decay, plus learning-rate
//! schedules.

use ndarray::Array2;

use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW: adaptive per-parameter step sizes with weight decay applied
/// directly to the weights rather than through the gradient.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        let v = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Self { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the accumulated gradients at learning rate `lr`.
    /// Frozen parameters are untouched; decay applies only where enabled.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (idx, (_, p)) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let eff_lr = lr * p.lr_scale;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= eff_lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
            if p.decay && self.cfg.weight_decay > 0.0 {
                p.value *= 1.0 - eff_lr * self.cfg.weight_decay;
            }
        }
    }
}

/// Per-step learning rate. All variants measure progress in optimizer steps;
/// epoch-granular policies are expressed via `steps_per_epoch` at
/// construction time.
#[derive(Debug, Clone)]
pub enum LrSchedule {
    Constant {
        base: f64,
    },
    /// Linear warmup to `base` over `warmup` steps, then linear decay to 0
    /// at `total` steps.
    Linear {
        base: f64,
        warmup: usize,
        total: usize,
    },
    /// `base * gamma^(step / step_every)`, stepped in whole multiples.
    StepLr {
        base: f64,
        gamma: f64,
        step_every: usize,
    },
    /// Linear warmup then cosine decay to 0 at `total` steps.
    Cosine {
        base: f64,
        warmup: usize,
        total: usize,
    },
}

impl LrSchedule {
    /// Builds a schedule by name ("linear" | "steplr" | "cosine" |
    /// "constant") from a total step budget and a warmup fraction.
    pub fn from_name(
        name: &str,
        base: f64,
        total_steps: usize,
        warmup_frac: f64,
        steplr_every: usize,
        steplr_gamma: f64,
    ) -> Result<Self, String> {
        let warmup = ((total_steps as f64) * warmup_frac).round() as usize;
        match name {
            "constant" => Ok(Self::Constant { base }),
            "linear" => Ok(Self::Linear { base, warmup, total: total_steps }),
            "steplr" => Ok(Self::StepLr { base, gamma: steplr_gamma, step_every: steplr_every }),
            "cosine" => Ok(Self::Cosine { base, warmup, total: total_steps }),
            other => Err(format!("unknown schedule: {other}")),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match *self {
            Self::Constant { base } => base,
            Self::Linear { base, warmup, total } => {
                if warmup > 0 && step < warmup {
                    base * (step + 1) as f64 / warmup as f64
                } else if total > warmup {
                    let rem = (total - step.min(total)) as f64 / (total - warmup) as f64;
                    base * rem
                } else {
                    base
                }
            }
            Self::StepLr { base, gamma, step_every } => {
                if step_every == 0 {
                    base
                } else {
                    base * gamma.powi((step / step_every) as i32)
                }
            }
            Self::Cosine { base, warmup, total } => {
                if warmup > 0 && step < warmup {
                    base * (step + 1) as f64 / warmup as f64
                } else if total > warmup {
                    let prog = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
                    base * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos())
                } else {
                    base
                }
            }
        }
    }
}
