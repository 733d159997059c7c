//! Minimal reverse-mode automatic differentiation over n-dimensional arrays.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks the record in
//! reverse and accumulates gradients. Ops are generic over [`Real`] so the
//! same code runs in f32 for training and f64 for finite-difference checks.
//! [`ParamStore`] owns named parameters with momentum buffers and implements
//! the polynomial-decay SGD step and the MPAR checkpoint format.

mod gradcheck;
mod store;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use store::{Binding, ParamStore, SgdConfig};
pub use tape::{Real, Tape, TensorRef};

/// f32-data convenience wrapper used by the direct registration optimizer.
pub(crate) fn trilinear_with_grad_f32(
    data: &[f32],
    dims: (usize, usize, usize),
    p: (f64, f64, f64),
) -> (f64, [f64; 3]) {
    tape::trilinear_with_grad(data, dims, p)
}
