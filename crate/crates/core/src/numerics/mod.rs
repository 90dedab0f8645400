//! Dense tensors, deterministic randomness, circular convolution and small
//! matrix algebra.

mod conv;
mod linalg;
mod rng;
mod tensor;

pub use conv::{conv2d_circular, conv2d_circular_backward, gaussian_kernel};
pub use linalg::{identity, matmul, random_rotation, small_det_inv, transpose};
pub use rng::Prng;
pub use tensor::Tensor;

/// Fills a tensor of the given shape with `scale * N(0, 1)` draws.
pub fn randn(shape: &[usize], scale: f64, rng: &mut Prng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = scale * rng.gaussian());
    t
}
