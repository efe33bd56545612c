//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Everything is generic over [`Float`]: gradient checks run in `f64`,
//! training and benchmarks in `f32`. Matrix products go through a
//! single-threaded blocked GEMM, so results are bitwise reproducible for a
//! given machine regardless of the configured thread count.

mod float;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use float::{gemm, Float};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::logsumexp;
#[cfg(test)]
use tape::gelu;

use crate::Result;

/// `a · b` without recording gradients.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone(), false), tape.leaf(b.clone(), false));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

/// Numerically stable softmax of every row.
pub fn row_softmax<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = tape.softmax(v)?;
    Ok(tape.value(out).clone())
}

/// Mean over rows of `logsumexp(row) − row[target]`.
pub fn cross_entropy_from_logits<T: Float>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone(), false);
    let out = tape.cross_entropy(v, targets)?;
    Ok(tape.scalar(out))
}

/// `out[:, i] = src[:, index[i]]`.
pub fn gather_columns<T: Float>(src: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.leaf(src.clone(), false);
    let out = tape.gather_columns(v, index)?;
    Ok(tape.value(out).clone())
}
