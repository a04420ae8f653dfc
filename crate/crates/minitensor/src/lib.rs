//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Covers exactly the operations a small transformer stack needs: matmul with
//! batch broadcasting, elementwise arithmetic, softmax, layer/batch norm,
//! embedding lookup, dropout and cross entropy, each with a registered
//! backward rule. Gradients are checked against central finite differences
//! via [`grad_check`].
//!
//! Tensors are generic over the element type: `f64` for gradient checking and
//! tests, `f32` for fast training. A graph and its tensors are confined to a
//! single thread; independent model replicas can run on separate threads.

pub mod check_suite;
mod gradcheck;
mod ops;
mod scalar;
mod tensor;

pub use gradcheck::grad_check;
pub use ops::{
    add, batch_norm1d, concat_last, cross_entropy_from_logits, dropout, embedding_lookup,
    gather_rows, layer_norm, linear, matmul, mean_all, mul, relu, scale, softmax_last, sub,
    sum_all, BatchNormState,
};
pub use scalar::Scalar;
pub use tensor::{no_grad, set_grad_enabled, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;
