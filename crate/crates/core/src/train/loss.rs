use crate::error::{Error, Result};
use crate::flow::{gaussian_log_norm, FlowModel};
use crate::numerics::Tensor;

/// PSNR reported when the error vanishes.
pub const PSNR_CAP: f64 = 99.0;

/// Negative log-likelihood in nats per dimension, averaged over the batch.
pub fn nll_loss(batch: &[Tensor], flow: &FlowModel) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = flow.dim() as f64;
    let mut total = 0.0;
    for x in batch {
        total += flow.log_prob(x)?;
    }
    Ok(-total / (batch.len() as f64 * n))
}

/// [`nll_loss`] with its parameter gradient accumulated into the flow.
pub fn nll_loss_and_grad(batch: &[Tensor], flow: &mut FlowModel) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = flow.dim();
    let scale = 1.0 / (batch.len() * n) as f64;
    let mut total = 0.0;
    let mut buffer = flow.params().zero_grad_buffer();
    for x in batch {
        let (z, logdet, tape) = flow.forward_tape(x)?;
        total += gaussian_log_norm(n) - 0.5 * z.norm_sq() + logdet;
        // d(-log p)/dz = z, d(-log p)/dlogdet = -1.
        flow.forward_backward(&tape, &z.scale(scale), -scale, &mut buffer)?;
    }
    flow.params_mut().accumulate(&buffer)?;
    Ok(-total * scale)
}

pub fn mse_loss(x_hat: &Tensor, x_true: &Tensor) -> Result<f64> {
    x_hat.check_shape("mse_loss", x_true.shape())?;
    Ok(x_hat.sub(x_true)?.norm_sq() / x_hat.len() as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        10.0 * libm::log10(peak * peak / mse)
    }
}

/// `10·log10(peak² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(x_hat: &Tensor, x_true: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse_loss(x_hat, x_true)?, peak))
}
