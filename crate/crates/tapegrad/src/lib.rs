//! Tape-based reverse-mode automatic differentiation over 2-D f64 arrays,
//! with the layer zoo, optimizer, and finite-difference checker used by the
//! sign-language modeling crates.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod sparse;
pub mod tape;

pub use gradcheck::{check_loss_gradients, CoordFailure, GradCheckConfig, GradCheckReport};
pub use nn::{
    apply_dropout, normal_init, xavier_uniform, BiLstm, Conv1d, Dropout, LayerNorm, Linear,
    Lstm, MultiHeadAttention, Param, ParamId, ParamStore, PositionalTable, TransformerBlock,
};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
