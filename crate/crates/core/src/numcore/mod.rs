//! Dense 64-bit numerics: matrices, softmax, RMSNorm, rotary embedding and
//! the matrix norms used by the attention-error bound.

mod matrix;
mod norm;
mod ops;

pub use matrix::{dot as vector_dot, matmul, Matrix};
pub use norm::{matrix_norm, spectral_norm, vector_norm, NormKind};
pub use ops::{
    rmsnorm, rmsnorm_backward_row, rmsnorm_row, rope_apply, rope_rotate_row, silu, silu_grad,
    softmax_in_place, softmax_rows,
};
