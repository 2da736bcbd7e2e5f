//! Elementwise activation kernels.

use crate::tensor::{Scalar, Tensor, TensorError};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `grad_out` where `x > 0`; the subgradient at exactly zero is zero.
///
/// `x` may be either the pre-activation or the ReLU output, since both are
/// positive on the same set.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        *v = v.max(T::zero());
    }
}

/// In-place mask of `grad` by `activation > 0`.
pub(crate) fn relu_mask_in_place<T: Scalar>(activation: &Tensor<T>, grad: &mut Tensor<T>) {
    debug_assert_eq!(activation.shape(), grad.shape());
    for (g, &a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}
