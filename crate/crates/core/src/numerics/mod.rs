//! Dense tensors, reverse-mode gradients, a finite-difference oracle and AdamW.

mod fd;
mod optim;
mod param;
mod tape;
mod tensor;

pub use fd::{finite_diff_grad, relative_error};
pub use optim::{AdamWConfig, AdamWState};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::{sigmoid, softplus, Tensor};

pub(crate) use tape::softmax_along;

use rand::Rng;

use crate::error::Result;

/// Tensor with entries drawn from `U(-bound, bound)`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

/// Glorot-uniform `[fan_out, fan_in]` weight matrix.
pub fn glorot(fan_out: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    uniform(
        &[fan_out, fan_in],
        (6.0 / (fan_in + fan_out) as f64).sqrt(),
        rng,
    )
}

/// Softmax of a plain tensor along `axis` (no tape).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(crate::error::Error::contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    Ok(softmax_along(x, axis))
}

#[cfg(test)]
mod tests;
