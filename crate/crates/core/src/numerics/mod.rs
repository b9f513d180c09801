//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! Every op treats its operands as matrices: the last dimension is the
//! column count and all leading dimensions fold into rows. Gradients are
//! stored on the tape, not on the tensors, so a [`Tensor`] is a plain value.

mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{AttentionMode, Grads, Segment, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function of one tensor.
///
/// Used by gradient checks. Runs `2 * len` evaluations of `f`.
pub fn finite_difference<T: Scalar>(
    x: &Tensor<T>,
    h: T,
    mut f: impl FnMut(&Tensor<T>) -> T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let two = T::from_f64(2.0);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (two * h);
    }
    out
}

/// Norm-wise relative error `||a - b|| / max(||a||, ||b||, floor)` over the
/// flattened tensors.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64(), y.to_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}

#[cfg(test)]
mod tests;
