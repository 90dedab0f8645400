//! Multi-scale invertible flow: actnorm, invertible 1×1 convolution and
//! affine coupling steps stacked behind squeeze operations.

mod actnorm;
mod coupling;
mod invconv;
mod model;
mod squeeze;

pub use actnorm::ActNorm;
pub use coupling::{AffineCoupling, CouplingContext, LOG_SCALE_CLAMP};
pub use invconv::{InvConv1x1, InvConvContext};
pub use model::{FlowConfig, FlowModel, FlowTape, InverseTape};
pub use squeeze::{concat_channels, split_channels, squeeze, unsqueeze};

use crate::diff::GradRule;
use crate::error::Result;
use crate::numerics::Tensor;

/// A [`GradRule`] layer with an exact inverse that is itself differentiable.
pub trait Bijector: GradRule {
    type InvContext;

    fn inverse(&self, params: &[Tensor], y: &Tensor) -> Result<(Tensor, Self::InvContext)>;

    /// Given `dL/dx` for `x = inverse(y)`, returns `dL/dy` and accumulates
    /// parameter gradients.
    fn inverse_backward(
        &self,
        params: &[Tensor],
        grads: &mut [Tensor],
        ctx: &Self::InvContext,
        dx: &Tensor,
    ) -> Result<Tensor>;
}

/// `-(n/2)·log(2π)`, the standard normal log-density at the origin.
pub fn gaussian_log_norm(n: usize) -> f64 {
    -0.5 * n as f64 * libm::log(2.0 * core::f64::consts::PI)
}
