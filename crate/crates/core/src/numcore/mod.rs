//! Dense row-major tensors, the handful of kernels the transformer needs, their
//! backward passes, a finite-difference gradient oracle and a FLOP counter.
//!
//! Everything here is a pure function of its inputs. Reductions run in a fixed
//! order, so identical inputs give bit-identical outputs.

mod counter;
mod gemm;
mod gradcheck;
mod ops;
mod real;
mod tensor;

pub use counter::{count_flops, flop_constants, record_flops};
pub use gemm::{gemm, MatMut, MatRef};
pub use gradcheck::{check_gradient, rel_error, GradCheck, DEFAULT_STEP};
pub use ops::{
    gelu, gelu_backward, gelu_scalar, layer_norm, layer_norm_backward, matmul, matmul_backward,
    softmax_rows, softmax_rows_backward, LayerNormCache, LN_EPS,
};
pub(crate) use ops::{
    bias_grad_rows, gelu_backward_slice, gelu_slice, linear,
    softmax_backward_in_place, softmax_in_place,
};
pub use real::Real;
pub use tensor::Tensor;
