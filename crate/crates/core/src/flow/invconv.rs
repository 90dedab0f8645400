use alloc::vec;

use super::actnorm::add_into;
use super::Bijector;
use crate::diff::{GradRule, ParamId};
use crate::error::{Error, Result};
use crate::numerics::{small_det_inv, Tensor};

/// Invertible 1×1 convolution: a learned `C×C` channel mixing applied at
/// every pixel. Log-det contribution is `H·W·log|det W|`.
#[derive(Debug, Clone)]
pub struct InvConv1x1 {
    pub weight: ParamId,
}

pub struct InvConvContext {
    input: Tensor,
    weight_inv: Tensor,
}

/// `out[:, p] = m · x[:, p]` for every pixel `p`.
fn mix_channels(m: &[f64], x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let xd = x.data();
    let mut out = Tensor::zeros(s);
    let od = out.data_mut();
    for i in 0..c {
        for j in 0..c {
            let w = m[i * c + j];
            if w == 0.0 {
                continue;
            }
            let src = &xd[j * plane..(j + 1) * plane];
            od[i * plane..(i + 1) * plane]
                .iter_mut()
                .zip(src)
                .for_each(|(o, &v)| *o += w * v);
        }
    }
    out
}

fn transposed(m: &[f64], c: usize) -> alloc::vec::Vec<f64> {
    let mut t = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            t[j * c + i] = m[i * c + j];
        }
    }
    t
}

/// `Σ_p a[:, p] b[:, p]ᵀ`.
fn outer_sum(a: &Tensor, b: &Tensor) -> alloc::vec::Vec<f64> {
    let s = a.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        let ai = &a.data()[i * plane..(i + 1) * plane];
        for j in 0..c {
            let bj = &b.data()[j * plane..(j + 1) * plane];
            out[i * c + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    out
}

impl InvConv1x1 {
    fn checked_inverse(&self, params: &[Tensor]) -> Result<(f64, Tensor)> {
        let (det, inv) = small_det_inv(&params[self.weight.0])?;
        if !det.is_finite() {
            return Err(Error::SingularMatrix { det });
        }
        Ok((det, inv))
    }
}

impl GradRule for InvConv1x1 {
    type Context = InvConvContext;

    fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<(Tensor, f64, InvConvContext)> {
        let s = x.shape();
        let plane = (s[1] * s[2]) as f64;
        let (det, weight_inv) = self.checked_inverse(params)?;
        let y = mix_channels(params[self.weight.0].data(), x);
        let ctx = InvConvContext {
            input: x.clone(),
            weight_inv,
        };
        Ok((y, plane * libm::log(det.abs()), ctx))
    }

    fn backward(
        &self,
        params: &[Tensor],
        grads: &mut [Tensor],
        ctx: &InvConvContext,
        dy: &Tensor,
        dlogdet: f64,
    ) -> Result<Tensor> {
        let s = dy.shape();
        let (c, plane) = (s[0], (s[1] * s[2]) as f64);
        let w = params[self.weight.0].data();
        let dx = mix_channels(&transposed(w, c), dy);
        // d log|det W| / dW = W^{-T}
        let mut g = outer_sum(dy, &ctx.input);
        let inv = ctx.weight_inv.data();
        for i in 0..c {
            for j in 0..c {
                g[i * c + j] += plane * dlogdet * inv[j * c + i];
            }
        }
        add_into(&mut grads[self.weight.0], &g);
        Ok(dx)
    }
}

impl Bijector for InvConv1x1 {
    type InvContext = InvConvContext;

    fn inverse(&self, params: &[Tensor], y: &Tensor) -> Result<(Tensor, InvConvContext)> {
        let (_, weight_inv) = self.checked_inverse(params)?;
        let x = mix_channels(weight_inv.data(), y);
        Ok((
            x,
            InvConvContext {
                input: y.clone(),
                weight_inv,
            },
        ))
    }

    fn inverse_backward(
        &self,
        _params: &[Tensor],
        grads: &mut [Tensor],
        ctx: &InvConvContext,
        dx: &Tensor,
    ) -> Result<Tensor> {
        let c = dx.shape()[0];
        let v = ctx.weight_inv.data();
        let vt = transposed(v, c);
        let dy = mix_channels(&vt, dx);
        // x = V y with V = W^{-1}:  dL/dW = -Vᵀ (dL/dV) Vᵀ,  dL/dV = Σ dx yᵀ.
        let dv = outer_sum(dx, &ctx.input);
        let mut tmp = vec![0.0; c * c];
        for i in 0..c {
            for k in 0..c {
                let a = vt[i * c + k];
                for j in 0..c {
                    tmp[i * c + j] += a * dv[k * c + j];
                }
            }
        }
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for k in 0..c {
                let a = tmp[i * c + k];
                for j in 0..c {
                    g[i * c + j] -= a * vt[k * c + j];
                }
            }
        }
        add_into(&mut grads[self.weight.0], &g);
        Ok(dy)
    }
}
