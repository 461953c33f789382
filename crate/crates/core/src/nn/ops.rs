//! Forward/backward pairs for the handful of layers the models need.
//!
//! Masking convention: a mask entry of 1 marks a *blocked* position. Blocking
//! is applied additively with -1e9 before the softmax, which underflows to an
//! exact 0 probability after the max-subtraction, so masked positions carry
//! neither probability nor gradient.

use super::matrix::Matrix;
use super::NnError;

const MASK_NEG: f64 = -1e9;
const BCE_EPS: f64 = 1e-12;

/// y = x W + b. `b` is broadcast over rows; pass an empty slice for no bias.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix, NnError> {
    let mut y = x.matmul(w)?;
    if !b.is_empty() {
        if b.len() != w.cols {
            return Err(NnError::ShapeMismatch {
                op: "affine bias",
                left_rows: 1,
                left_cols: b.len(),
                right_rows: w.rows,
                right_cols: w.cols,
            });
        }
        for r in 0..y.rows {
            for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
                *v += bias;
            }
        }
    }
    Ok(y)
}

/// Gradients of `affine`: returns (dx, dw, db) for upstream dy.
pub fn affine_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>), NnError> {
    let dx = dy.matmul_bt(w)?;
    let dw = x.matmul_at(dy)?;
    let mut db = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        for (acc, v) in db.iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
    Ok((dx, dw, db))
}

/// Row-wise softmax with optional blocking mask (1 = blocked).
///
/// Postconditions: every output row sums to 1 within 1e-12 and blocked
/// entries are exactly 0. A row with every entry blocked is an error rather
/// than a NaN row.
pub fn masked_softmax(scores: &Matrix, mask: Option<&Matrix>) -> Result<Matrix, NnError> {
    if let Some(m) = mask {
        if (m.rows, m.cols) != (scores.rows, scores.cols) {
            return Err(NnError::ShapeMismatch {
                op: "masked_softmax",
                left_rows: scores.rows,
                left_cols: scores.cols,
                right_rows: m.rows,
                right_cols: m.cols,
            });
        }
    }
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    for r in 0..scores.rows {
        let blocked = |c: usize| mask.is_some_and(|m| m.at(r, c) != 0.0);
        if (0..scores.cols).all(blocked) {
            return Err(NnError::FullyMaskedRow { row: r });
        }
        let mut max = f64::NEG_INFINITY;
        for c in 0..scores.cols {
            let s = if blocked(c) { scores.at(r, c) + MASK_NEG } else { scores.at(r, c) };
            max = max.max(s);
        }
        let mut sum = 0.0;
        for c in 0..scores.cols {
            let s = if blocked(c) { scores.at(r, c) + MASK_NEG } else { scores.at(r, c) };
            let e = (s - max).exp();
            *out.at_mut(r, c) = e;
            sum += e;
        }
        for c in 0..scores.cols {
            *out.at_mut(r, c) /= sum;
            // The additive -1e9 already underflows to 0 for any realistic
            // score scale; pin it so the postcondition is unconditional.
            if blocked(c) {
                *out.at_mut(r, c) = 0.0;
            }
        }
    }
    Ok(out)
}

/// Backward of a row-wise softmax: dS_ij = P_ij (dP_ij - sum_k dP_ik P_ik).
pub fn softmax_rows_backward(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    assert_eq!((probs.rows, probs.cols), (dprobs.rows, dprobs.cols));
    let mut ds = Matrix::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let mut dot = 0.0;
        for (p, dp) in probs.row(r).iter().zip(dprobs.row(r)) {
            dot += p * dp;
        }
        for c in 0..probs.cols {
            *ds.at_mut(r, c) = probs.at(r, c) * (dprobs.at(r, c) - dot);
        }
    }
    ds
}

/// Attention probabilities kept from the forward pass for the backward pass.
pub struct AttnCache {
    pub probs: Matrix,
    scale: f64,
}

/// Scaled dot-product attention over already-projected q/k/v.
///
/// scores = q k^T / sqrt(d_key), probs = masked_softmax(scores), out = probs v.
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&Matrix>,
) -> Result<(Matrix, AttnCache), NnError> {
    if k.rows != v.rows {
        return Err(NnError::ShapeMismatch {
            op: "attention k/v",
            left_rows: k.rows,
            left_cols: k.cols,
            right_rows: v.rows,
            right_cols: v.cols,
        });
    }
    let scale = 1.0 / (k.cols as f64).sqrt();
    let mut scores = q.matmul_bt(k)?;
    scores.scale(scale);
    let probs = masked_softmax(&scores, mask)?;
    let out = probs.matmul(v)?;
    Ok((out, AttnCache { probs, scale }))
}

/// Gradients of `attention`: returns (dq, dk, dv) for upstream dy.
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cache: &AttnCache,
    dy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix), NnError> {
    let dv = cache.probs.matmul_at(dy)?;
    let dprobs = dy.matmul_bt(v)?;
    let mut dscores = softmax_rows_backward(&cache.probs, &dprobs);
    dscores.scale(cache.scale);
    let dq = dscores.matmul(k)?;
    let dk = dscores.matmul_at(q)?;
    Ok((dq, dk, dv))
}

/// Numerically stable logistic function: no overflow at either extreme.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy; predictions are clamped to [eps, 1-eps].
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64, NnError> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(NnError::EmptyInput { op: "bce_loss" });
    }
    let mut sum = 0.0;
    for (p, y) in pred.iter().zip(target) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(sum / pred.len() as f64)
}

/// d(mean BCE)/d(pred). Zero where the clamp is active, matching the loss.
pub fn bce_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, y)| {
            if *p < BCE_EPS || *p > 1.0 - BCE_EPS {
                return 0.0;
            }
            (-y / p + (1.0 - y) / (1.0 - p)) / n
        })
        .collect()
}
