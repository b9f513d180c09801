//! Training objective: bidirectional in-batch contrastive loss plus a
//! spreadout regularizer on each side.
//!
//! Each term has a tape builder (for training) and a value-only wrapper.
//! Similarities are raw dot products with no temperature.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

fn check_pair<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::shape("similarity", x.shape(), y.shape()));
    }
    if x.rows() != y.rows() {
        return Err(Error::Batch(format!(
            "speech side has {} rows, text side has {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::Batch("empty batch".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("similarity", x.shape(), y.shape()));
    }
    Ok(())
}

/// S = X·Yᵀ; entry (i, j) scores speech i against text j.
pub fn similarity_matrix<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(x, y)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let s = tape.matmul_t(a, b)?;
    Ok(tape.value(s).clone())
}

/// Contrastive loss in both directions: CE(S) + CE(Sᵀ).
pub fn bidirectional_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let s = tape.matmul_t(x, y)?;
    let st = tape.matmul_t(y, x)?;
    let a = tape.diag_cross_entropy(s)?;
    let b = tape.diag_cross_entropy(st)?;
    tape.add(a, b)
}

/// Global orthogonal regularization on row-normalized Z:
/// M1² + max(0, M2 − 1/p), with M1, M2 the first and second moments of
/// the off-diagonal cosine similarities. Zero for fewer than two rows.
pub fn spreadout_on_tape<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let (n, p) = {
        let t = tape.value(z);
        (t.rows(), t.cols())
    };
    if n < 2 {
        log::warn!("spreadout loss on a batch of {n} rows is defined as 0");
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let zn = tape.l2_normalize_rows(z);
    let g = tape.matmul_t(zn, zn)?;
    let m1 = tape.offdiag_mean(g)?;
    let g2 = tape.mul(g, g)?;
    let m2 = tape.offdiag_mean(g2)?;
    let first = tape.mul(m1, m1)?;
    let excess = tape.add_scalar(m2, -T::from_f64(1.0 / p as f64));
    let second = tape.relu(excess);
    tape.add(first, second)
}

/// Bidirectional contrastive + λ·(spreadout(X) + spreadout(Y)).
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    lambda: f64,
) -> Result<Var> {
    let c = bidirectional_on_tape(tape, x, y)?;
    if lambda == 0.0 {
        return Ok(c);
    }
    let sx = spreadout_on_tape(tape, x)?;
    let sy = spreadout_on_tape(tape, y)?;
    let s = tape.add(sx, sy)?;
    let s = tape.scale(s, T::from_f64(lambda));
    tape.add(c, s)
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> T {
    tape.value(v).data()[0]
}

/// −(1/N) Σᵢ log softmax(Sᵢ)ᵢ, computed with log-sum-exp.
pub fn contrastive_loss_one_direction<T: Scalar>(s: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.constant(s.clone());
    let l = tape.diag_cross_entropy(v)?;
    Ok(scalar_of(&tape, l))
}

pub fn bidirectional_contrastive<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    check_pair(x, y)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let l = bidirectional_on_tape(&mut tape, a, b)?;
    Ok(scalar_of(&tape, l))
}

pub fn spreadout_loss<T: Scalar>(z: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let l = spreadout_on_tape(&mut tape, v)?;
    Ok(scalar_of(&tape, l))
}

pub fn total_loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, lambda: f64) -> Result<T> {
    Ok(total_loss_with_grads(x, y, lambda)?.0)
}

/// Loss terms and gradients with respect to both embedding sets.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub contrastive: T,
    /// spreadout(X) + spreadout(Y), before weighting by λ.
    pub spreadout: T,
    pub dx: Tensor<T>,
    pub dy: Tensor<T>,
}

pub fn loss_with_grads<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda: f64,
) -> Result<LossBreakdown<T>> {
    check_pair(x, y)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
    let c = bidirectional_on_tape(&mut tape, a, b)?;
    let sx = spreadout_on_tape(&mut tape, a)?;
    let sy = spreadout_on_tape(&mut tape, b)?;
    let s = tape.add(sx, sy)?;
    let weighted = tape.scale(s, T::from_f64(lambda));
    let l = tape.add(c, weighted)?;
    let total = scalar_of(&tape, l);
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut g = tape.backward(l)?;
    Ok(LossBreakdown {
        total,
        contrastive: scalar_of(&tape, c),
        spreadout: scalar_of(&tape, s),
        dx: g.take(a),
        dy: g.take(b),
    })
}

/// Loss value with its gradients with respect to X and Y.
pub fn total_loss_with_grads<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda: f64,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let b = loss_with_grads(x, y, lambda)?;
    Ok((b.total, b.dx, b.dy))
}
