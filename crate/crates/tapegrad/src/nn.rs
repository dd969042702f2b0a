//! Parameter storage and neural network layers built on the tape.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Gradients, Tape, Var};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// One named parameter tensor with its accumulated gradient.
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    /// Whether decoupled weight decay applies (weights yes, biases/gains no).
    pub decay: bool,
    /// Per-parameter learning-rate multiplier (e.g. reduced encoder rate
    /// during fine-tuning).
    pub lr_scale: f64,
    /// Frozen parameters bind as constants and are skipped by optimizers.
    pub frozen: bool,
}

/// Owns all trainable state of a model.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.by_name(&name).is_none(),
            "duplicate parameter name: {name}"
        );
        let grad = Array2::zeros(value.dim());
        self.params.push(Param { name, value, grad, decay, lr_scale: 1.0, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Binds a parameter onto the tape, reusing the existing leaf if this
    /// parameter was already bound on this tape (so gradients accumulate on
    /// one node). Frozen parameters bind as constants.
    pub fn use_on(&self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = tape.find_bind(id.0) {
            return v;
        }
        let p = &self.params[id.0];
        if p.frozen {
            return tape.constant(p.value.clone());
        }
        let v = tape.leaf(p.value.clone());
        tape.record_bind(id.0, v);
        v
    }

    /// Adds the tape's gradients into the per-parameter accumulators.
    pub fn accumulate(&mut self, tape: &Tape, grads: &mut Gradients) {
        for &(pid, var) in tape.bound_params() {
            if let Some(g) = grads.take(var) {
                self.params[pid].grad += &g;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Applies a learning-rate multiplier to every parameter whose name
    /// starts with `prefix`.
    pub fn set_lr_scale_prefix(&mut self, prefix: &str, scale: f64) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.lr_scale = scale;
            }
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.global_grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad *= s;
            }
        }
    }
}

/// Glorot uniform initialization for a `[fan_in, fan_out]` weight.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Small-variance normal initialization (embeddings, positional tables).
pub fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Inverted-scale dropout mask generator used during training forwards.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn mask(&mut self, shape: (usize, usize)) -> Rc<Array2<f64>> {
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        Rc::new(Array2::from_shape_fn(shape, |_| {
            if self.rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

/// Applies an inverted-scale dropout mask when one is active.
pub fn apply_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<&mut Dropout>) -> Var {
    match dropout {
        Some(d) if d.p > 0.0 => {
            let mask = d.mask(tape.shape(x));
            tape.dropout(x, mask)
        }
        _ => x,
    }
}

/// Affine layer `y = x W + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier_uniform(d_in, d_out, rng), true);
        let b = store.add(format!("{name}.b"), Array2::zeros((1, d_out)), false);
        Self { w, b }
    }

    /// Zero-initialized variant for readout heads: the first update writes
    /// class-mean feature differences, so any offset shared across inputs
    /// cancels instead of dominating early logits.
    pub fn new_zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Array2::zeros((d_in, d_out)), true);
        let b = store.add(format!("{name}.b"), Array2::zeros((1, d_out)), false);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.use_on(tape, self.w);
        let b = store.use_on(tape, self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Learned per-feature scale and shift around row normalization.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, d)), false);
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, d)), false);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let gamma = store.use_on(tape, self.gamma);
        let beta = store.use_on(tape, self.beta);
        tape.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Standard scaled dot-product multi-head self-attention over `[t, d]`.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads >= 1 && d % heads == 0, "width {d} not divisible by {heads} heads");
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, rng),
            heads,
            d,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dropout: &mut Option<&mut Dropout>,
    ) -> Var {
        self.forward_qkv(tape, store, x, x, false, dropout)
    }

    /// Attention with separate query and key/value sources. `causal` adds a
    /// strictly-upper-triangular penalty so position i attends only to
    /// positions ≤ i (query and key lengths must then match).
    pub fn forward_qkv(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_src: Var,
        kv_src: Var,
        causal: bool,
        dropout: &mut Option<&mut Dropout>,
    ) -> Var {
        let q = self.wq.forward(tape, store, q_src);
        let k = self.wk.forward(tape, store, kv_src);
        let v = self.wv.forward(tape, store, kv_src);
        let (tq, tk) = (tape.shape(q).0, tape.shape(k).0);
        let mask = if causal {
            assert_eq!(tq, tk, "causal attention needs equal query/key lengths");
            let mut m = Array2::zeros((tq, tk));
            for i in 0..tq {
                for j in (i + 1)..tk {
                    m[[i, j]] = -1e30;
                }
            }
            Some(tape.constant(m))
        } else {
            None
        };
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m);
            }
            let attn = tape.softmax_rows(scores);
            let attn = apply_dropout(tape, attn, dropout);
            head_outs.push(tape.matmul(attn, vh));
        }
        let mut cat = head_outs[0];
        for &h in &head_outs[1..] {
            cat = tape.concat_cols(cat, h);
        }
        self.wo.forward(tape, store, cat)
    }
}

/// Pre-norm transformer encoder block: attention and feed-forward sublayers,
/// each with a residual connection.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, d * ff_mult, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), d * ff_mult, d, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dropout: &mut Option<&mut Dropout>,
    ) -> Var {
        let h = self.ln1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, dropout);
        let a = apply_dropout(tape, a, dropout);
        let x1 = tape.add(x, a);
        let h2 = self.ln2.forward(tape, store, x1);
        let f = self.ff1.forward(tape, store, h2);
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, store, f);
        let f = apply_dropout(tape, f, dropout);
        tape.add(x1, f)
    }
}

/// Learned positional encoding table added to the first `t` positions.
pub struct PositionalTable {
    pub table: ParamId,
    pub max_len: usize,
}

impl PositionalTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        max_len: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let table = store.add(name, normal_init(max_len, d, 0.02, rng), false);
        Self { table, max_len }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let t = tape.shape(x).0;
        assert!(
            t <= self.max_len,
            "sequence length {t} exceeds positional table {}",
            self.max_len
        );
        let table = store.use_on(tape, self.table);
        let pos = tape.rows(table, Rc::new((0..t).collect()));
        tape.add(x, pos)
    }
}

/// Single-direction LSTM; returns the full hidden sequence `[t, hidden]`.
pub struct Lstm {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            xavier_uniform(d_in + hidden, 4 * hidden, rng),
            true,
        );
        // Forget-gate bias starts at 1 so early steps retain state.
        let mut bias = Array2::zeros((1, 4 * hidden));
        for j in hidden..2 * hidden {
            bias[[0, j]] = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias, false);
        Self { w, b, hidden }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let t = tape.shape(x).0;
        let h = self.hidden;
        let w = store.use_on(tape, self.w);
        let b = store.use_on(tape, self.b);
        let mut h_prev = tape.constant(Array2::zeros((1, h)));
        let mut c_prev = tape.constant(Array2::zeros((1, h)));
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = tape.rows(x, Rc::new(vec![step]));
            let cat = tape.concat_cols(xt, h_prev);
            let lin = tape.matmul(cat, w);
            let gates = tape.add(lin, b);
            let i_g = tape.slice_cols(gates, 0, h);
            let f_g = tape.slice_cols(gates, h, 2 * h);
            let g_g = tape.slice_cols(gates, 2 * h, 3 * h);
            let o_g = tape.slice_cols(gates, 3 * h, 4 * h);
            let i_s = tape.sigmoid(i_g);
            let f_s = tape.sigmoid(f_g);
            let g_t = tape.tanh(g_g);
            let o_s = tape.sigmoid(o_g);
            let fc = tape.mul(f_s, c_prev);
            let ig = tape.mul(i_s, g_t);
            let c_t = tape.add(fc, ig);
            let ct_tanh = tape.tanh(c_t);
            let h_t = tape.mul(o_s, ct_tanh);
            outputs.push(h_t);
            h_prev = h_t;
            c_prev = c_t;
        }
        tape.concat_rows(&outputs)
    }
}

/// Bidirectional LSTM; concatenates forward and backward hidden sequences
/// to `[t, 2*hidden]`.
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), d_in, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), d_in, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let t = tape.shape(x).0;
        let rev: Rc<Vec<usize>> = Rc::new((0..t).rev().collect());
        let hf = self.fwd.forward(tape, store, x);
        let xr = tape.rows(x, Rc::clone(&rev));
        let hb_rev = self.bwd.forward(tape, store, xr);
        let hb = tape.rows(hb_rev, rev);
        tape.concat_cols(hf, hb)
    }
}

/// 1-D convolution over time implemented as unfold + matmul.
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            xavier_uniform(kernel * c_in, c_out, rng),
            true,
        );
        let b = store.add(format!("{name}.b"), Array2::zeros((1, c_out)), false);
        Self { w, b, kernel, stride, pad }
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.use_on(tape, self.w);
        let b = store.use_on(tape, self.b);
        let unfolded = tape.unfold_rows(x, self.kernel, self.stride, self.pad);
        let conv = tape.matmul(unfolded, w);
        tape.add_row(conv, b)
    }
}
