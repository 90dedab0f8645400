use alloc::vec::Vec;

use super::Bijector;
use crate::diff::{GradRule, ParamId};
use crate::error::Result;
use crate::numerics::Tensor;

/// Per-channel affine normalization `y = (x + bias) · exp(log_scale)`.
#[derive(Debug, Clone)]
pub struct ActNorm {
    pub log_scale: ParamId,
    pub bias: ParamId,
}

fn dims(x: &Tensor) -> (usize, usize) {
    let s = x.shape();
    (s[0], s[1] * s[2])
}

impl ActNorm {
    /// Per-channel `(mean, std)` over every pixel of every sample.
    pub fn channel_stats(batch: &[Tensor]) -> Vec<(f64, f64)> {
        let (c, plane) = dims(&batch[0]);
        let count = (batch.len() * plane) as f64;
        (0..c)
            .map(|ch| {
                let values = || {
                    batch
                        .iter()
                        .flat_map(move |x| x.data()[ch * plane..(ch + 1) * plane].iter().copied())
                };
                let mean = values().sum::<f64>() / count;
                let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                (mean, libm::sqrt(var))
            })
            .collect()
    }
}

impl GradRule for ActNorm {
    /// Output `y`.
    type Context = Tensor;

    fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<(Tensor, f64, Tensor)> {
        let (c, plane) = dims(x);
        let ls = params[self.log_scale.0].data();
        let b = params[self.bias.0].data();
        let mut y = x.clone();
        for ch in 0..c {
            let scale = libm::exp(ls[ch]);
            y.data_mut()[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = (*v + b[ch]) * scale);
        }
        let logdet = plane as f64 * ls.iter().sum::<f64>();
        Ok((y.clone(), logdet, y))
    }

    fn backward(
        &self,
        params: &[Tensor],
        grads: &mut [Tensor],
        y: &Tensor,
        dy: &Tensor,
        dlogdet: f64,
    ) -> Result<Tensor> {
        let (c, plane) = dims(y);
        let ls = params[self.log_scale.0].data();
        let mut dx = dy.clone();
        let mut g_ls = Vec::with_capacity(c);
        let mut g_b = Vec::with_capacity(c);
        for ch in 0..c {
            let scale = libm::exp(ls[ch]);
            let range = ch * plane..(ch + 1) * plane;
            let dyc = &dy.data()[range.clone()];
            let yc = &y.data()[range.clone()];
            let sum_dy: f64 = dyc.iter().sum();
            let sum_dy_y: f64 = dyc.iter().zip(yc).map(|(a, b)| a * b).sum();
            g_ls.push(sum_dy_y + plane as f64 * dlogdet);
            g_b.push(sum_dy * scale);
            dx.data_mut()[range].iter_mut().for_each(|v| *v *= scale);
        }
        add_into(&mut grads[self.log_scale.0], &g_ls);
        add_into(&mut grads[self.bias.0], &g_b);
        Ok(dx)
    }
}

impl Bijector for ActNorm {
    /// Output `x` of the inverse map.
    type InvContext = Tensor;

    fn inverse(&self, params: &[Tensor], y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c, plane) = dims(y);
        let ls = params[self.log_scale.0].data();
        let b = params[self.bias.0].data();
        let mut x = y.clone();
        for ch in 0..c {
            let inv_scale = libm::exp(-ls[ch]);
            x.data_mut()[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = *v * inv_scale - b[ch]);
        }
        Ok((x.clone(), x))
    }

    fn inverse_backward(
        &self,
        params: &[Tensor],
        grads: &mut [Tensor],
        x: &Tensor,
        dx: &Tensor,
    ) -> Result<Tensor> {
        let (c, plane) = dims(x);
        let ls = params[self.log_scale.0].data();
        let b = params[self.bias.0].data();
        let mut dy = dx.clone();
        let mut g_ls = Vec::with_capacity(c);
        let mut g_b = Vec::with_capacity(c);
        for ch in 0..c {
            let range = ch * plane..(ch + 1) * plane;
            let dxc = &dx.data()[range.clone()];
            let xc = &x.data()[range.clone()];
            g_b.push(-dxc.iter().sum::<f64>());
            g_ls.push(-dxc.iter().zip(xc).map(|(d, v)| d * (v + b[ch])).sum::<f64>());
            let inv_scale = libm::exp(-ls[ch]);
            dy.data_mut()[range].iter_mut().for_each(|v| *v *= inv_scale);
        }
        add_into(&mut grads[self.log_scale.0], &g_ls);
        add_into(&mut grads[self.bias.0], &g_b);
        Ok(dy)
    }
}

pub(crate) fn add_into(acc: &mut Tensor, local: &[f64]) {
    acc.data_mut()
        .iter_mut()
        .zip(local)
        .for_each(|(a, l)| *a += l);
}
