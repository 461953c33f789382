//! Small dense-math kernel used by every learned component.
//!
//! There is deliberately no autodiff graph here. Each operation is a plain
//! forward function paired with an explicit backward function; composite
//! models (raters, fusion stack, CTR head) chain those backwards by hand and
//! verify the chain against [`finite_diff_check`]. All state is `f64` and
//! row-major, which keeps results bit-reproducible across runs and platforms.

mod check;
mod matrix;
mod mlp;
mod ops;
mod optim;

pub use check::finite_diff_check;
pub use matrix::Matrix;
pub use mlp::{Mlp, MlpCache};
pub use ops::{
    affine, affine_backward, attention, attention_backward, bce_grad, bce_loss, masked_softmax,
    sigmoid, softmax_rows_backward, AttnCache,
};
pub use optim::{AdamConfig, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },
    #[error("unknown parameter {name}")]
    UnknownParam { name: String },
}
