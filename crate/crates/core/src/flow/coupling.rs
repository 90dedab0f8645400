use alloc::vec::Vec;

use super::squeeze::{concat_channels, split_channels};
use super::Bijector;
use crate::diff::{GradRule, ParamId};
use crate::error::Result;
use crate::numerics::{conv2d_circular, conv2d_circular_backward, Tensor};

/// Bound on the raw log-scale before exponentiation.
pub const LOG_SCALE_CLAMP: f64 = 5.0;

/// Affine coupling: the first half of the channels is scaled and shifted by
/// `(s, t) = NN(second half)`, the second half passes through unchanged.
///
/// `NN` is `conv3x3 -> ReLU -> conv3x3` with circular padding; its output
/// channels are `[raw_log_s | t]` and `s = exp(clamp(raw_log_s, ±5))`.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
}

/// Intermediate values of one NN evaluation plus the untransformed half
/// (`x_a` after the forward map, `x_a` recovered by the inverse map).
pub struct CouplingContext {
    cond: Tensor,
    pre_act: Tensor,
    hidden: Tensor,
    raw_log_s: Tensor,
    scale: Tensor,
    x_a: Tensor,
}

struct NnOut {
    pre_act: Tensor,
    hidden: Tensor,
    raw_log_s: Tensor,
    shift: Tensor,
    scale: Tensor,
}

impl AffineCoupling {
    fn nn(&self, params: &[Tensor], cond: &Tensor) -> Result<NnOut> {
        let pre_act = conv2d_circular(
            cond,
            &params[self.conv1_weight.0],
            &params[self.conv1_bias.0],
        )?;
        let hidden = pre_act.map(|v| v.max(0.0));
        let out = conv2d_circular(
            &hidden,
            &params[self.conv2_weight.0],
            &params[self.conv2_bias.0],
        )?;
        let half = out.shape()[0] / 2;
        let (raw_log_s, shift) = split_channels(&out, half)?;
        let scale = raw_log_s.map(|r| libm::exp(r.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)));
        Ok(NnOut {
            pre_act,
            hidden,
            raw_log_s,
            shift,
            scale,
        })
    }

    /// Back-propagates `(d raw_log_s, d t)` through the NN and returns the
    /// cotangent of its conditioning input.
    fn nn_backward(
        &self,
        params: &[Tensor],
        grads: &mut [Tensor],
        ctx: &CouplingContext,
        d_raw: &Tensor,
        d_shift: &Tensor,
    ) -> Result<Tensor> {
        let d_out = concat_channels(d_raw, d_shift)?;
        let (w2, b2) = (self.conv2_weight.0, self.conv2_bias.0);
        let (w1, b1) = (self.conv1_weight.0, self.conv1_bias.0);
        let mut g_w2 = Tensor::zeros(params[w2].shape());
        let mut g_b2 = Tensor::zeros(params[b2].shape());
        let mut d_hidden =
            conv2d_circular_backward(&ctx.hidden, &params[w2], &d_out, &mut g_w2, &mut g_b2)?;
        d_hidden
            .data_mut()
            .iter_mut()
            .zip(ctx.pre_act.data())
            .for_each(|(d, &p)| {
                if p <= 0.0 {
                    *d = 0.0
                }
            });
        let mut g_w1 = Tensor::zeros(params[w1].shape());
        let mut g_b1 = Tensor::zeros(params[b1].shape());
        let d_cond =
            conv2d_circular_backward(&ctx.cond, &params[w1], &d_hidden, &mut g_w1, &mut g_b1)?;
        grads[w2].add_assign(&g_w2)?;
        grads[b2].add_assign(&g_b2)?;
        grads[w1].add_assign(&g_w1)?;
        grads[b1].add_assign(&g_b1)?;
        Ok(d_cond)
    }
}

fn clamp_mask(raw: f64) -> f64 {
    if raw > -LOG_SCALE_CLAMP && raw < LOG_SCALE_CLAMP {
        1.0
    } else {
        0.0
    }
}

impl GradRule for AffineCoupling {
    type Context = CouplingContext;

    fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<(Tensor, f64, CouplingContext)> {
        let half = x.shape()[0] / 2;
        let (x_a, x_b) = split_channels(x, half)?;
        let nn = self.nn(params, &x_b)?;
        let mut y_a = x_a.mul(&nn.scale)?;
        y_a.add_assign(&nn.shift)?;
        let logdet: f64 = nn
            .raw_log_s
            .data()
            .iter()
            .map(|r| r.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
            .sum();
        let y = concat_channels(&y_a, &x_b)?;
        let ctx = CouplingContext {
            cond: x_b,
            pre_act: nn.pre_act,
            hidden: nn.hidden,
            raw_log_s: nn.raw_log_s,
            scale: nn.scale,
            x_a,
        };
        Ok((y, logdet, ctx))
    }

    fn backward(
        &self,
        params: &[Tensor],
        grads: &mut [Tensor],
        ctx: &CouplingContext,
        dy: &Tensor,
        dlogdet: f64,
    ) -> Result<Tensor> {
        let half = dy.shape()[0] / 2;
        let (dy_a, dy_b) = split_channels(dy, half)?;
        let dx_a = dy_a.mul(&ctx.scale)?;
        let d_raw: Vec<f64> = dy_a
            .data()
            .iter()
            .zip(ctx.x_a.data())
            .zip(ctx.scale.data())
            .zip(ctx.raw_log_s.data())
            .map(|(((&d, &xa), &s), &raw)| (d * xa * s + dlogdet) * clamp_mask(raw))
            .collect();
        let d_raw = Tensor::from_vec(ctx.raw_log_s.shape(), d_raw)?;
        let d_cond = self.nn_backward(params, grads, ctx, &d_raw, &dy_a)?;
        let dx_b = dy_b.add(&d_cond)?;
        concat_channels(&dx_a, &dx_b)
    }
}

impl Bijector for AffineCoupling {
    type InvContext = CouplingContext;

    fn inverse(&self, params: &[Tensor], y: &Tensor) -> Result<(Tensor, CouplingContext)> {
        let half = y.shape()[0] / 2;
        let (y_a, y_b) = split_channels(y, half)?;
        let nn = self.nn(params, &y_b)?;
        let x_a: Vec<f64> = y_a
            .data()
            .iter()
            .zip(nn.shift.data())
            .zip(nn.scale.data())
            .map(|((&ya, &t), &s)| (ya - t) / s)
            .collect();
        let x_a = Tensor::from_vec(y_a.shape(), x_a)?;
        let x = concat_channels(&x_a, &y_b)?;
        let ctx = CouplingContext {
            cond: y_b,
            pre_act: nn.pre_act,
            hidden: nn.hidden,
            raw_log_s: nn.raw_log_s,
            scale: nn.scale,
            x_a,
        };
        Ok((x, ctx))
    }

    fn inverse_backward(
        &self,
        params: &[Tensor],
        grads: &mut [Tensor],
        ctx: &CouplingContext,
        dx: &Tensor,
    ) -> Result<Tensor> {
        let half = dx.shape()[0] / 2;
        let (dx_a, dx_b) = split_channels(dx, half)?;
        let dy_a: Vec<f64> = dx_a
            .data()
            .iter()
            .zip(ctx.scale.data())
            .map(|(&d, &s)| d / s)
            .collect();
        let dy_a = Tensor::from_vec(dx_a.shape(), dy_a)?;
        let d_shift = dy_a.scale(-1.0);
        let d_raw: Vec<f64> = dx_a
            .data()
            .iter()
            .zip(ctx.x_a.data())
            .zip(ctx.raw_log_s.data())
            .map(|((&d, &xa), &raw)| -d * xa * clamp_mask(raw))
            .collect();
        let d_raw = Tensor::from_vec(ctx.raw_log_s.shape(), d_raw)?;
        let d_cond = self.nn_backward(params, grads, ctx, &d_raw, &d_shift)?;
        let dy_b = dx_b.add(&d_cond)?;
        concat_channels(&dy_a, &dy_b)
    }
}
