//! The unrolled proximal gradient network.
//!
//! Each fold takes a gradient step on `½‖y − A x‖²`, maps the iterate into
//! the latent space of its own flow, shrinks it toward the origin and maps it
//! back. The last fold skips the shrinkage. The iteration starts from the
//! flow's most likely image `g(0)`.

use alloc::format;
use alloc::vec::Vec;

use crate::diff::{ParamId, ParamStore, Parameters};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, FlowTape, InverseTape};
use crate::numerics::Tensor;
use crate::operators::ForwardOp;

const MU: ParamId = ParamId(0);
const RHO: ParamId = ParamId(1);

/// Floor for the raw shrinkage parameter; `softplus(-50) ≈ 2e-22`, which
/// vanishes against 1 in `1 + λ`.
pub const RHO_FLOOR: f64 = -50.0;

pub fn softplus(rho: f64) -> f64 {
    if rho > 30.0 {
        rho
    } else {
        libm::log1p(libm::exp(rho))
    }
}

fn sigmoid(rho: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-rho))
}

/// Raw parameter `ρ` with `softplus(ρ) = λ`, floored at [`RHO_FLOOR`].
pub fn inverse_softplus(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        RHO_FLOOR
    } else if lambda > 30.0 {
        lambda
    } else {
        libm::log(libm::expm1(lambda)).max(RHO_FLOOR)
    }
}

/// `x + μ Aᵀ(y − A x)`: a descent step on `½‖y − A x‖²`.
pub fn dc_step(x: &Tensor, y: &Tensor, op: &ForwardOp, mu: f64) -> Result<Tensor> {
    let residual = op.adjoint(&y.sub(&op.apply(x)?)?)?;
    let mut out = x.clone();
    out.axpy(mu, &residual)?;
    Ok(out)
}

/// `z / (1 + λ)`, the proximal map of `(λ/2)‖z‖²`.
pub fn prox_shrink(z: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("shrinkage must be >= 0, got {lambda}")));
    }
    Ok(z.scale(1.0 / (1.0 + lambda)))
}

/// One fold: an independent flow plus its step size `μ` and shrinkage
/// `λ = softplus(ρ)`.
#[derive(Debug, Clone)]
pub struct Fold {
    pub flow: FlowModel,
    scalars: ParamStore,
}

impl Fold {
    pub fn new(flow: FlowModel, mu: f64, lambda: f64) -> Self {
        let mut scalars = ParamStore::new();
        scalars.insert("mu", Tensor::scalar(mu)).expect("fresh store");
        scalars
            .insert("rho", Tensor::scalar(inverse_softplus(lambda)))
            .expect("fresh store");
        Self { flow, scalars }
    }

    pub fn mu(&self) -> f64 {
        self.scalars.value(MU).item()
    }

    pub fn rho(&self) -> f64 {
        self.scalars.value(RHO).item()
    }

    pub fn lambda(&self) -> f64 {
        softplus(self.rho())
    }

    pub fn set_mu(&mut self, mu: f64) {
        self.scalars.value_mut(MU).data_mut()[0] = mu;
    }

    pub fn set_rho(&mut self, rho: f64) {
        self.scalars.value_mut(RHO).data_mut()[0] = rho;
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.set_rho(inverse_softplus(lambda));
    }
}

/// Gradient buffers for every fold, laid out like the net's parameters.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub folds: Vec<FoldGrads>,
}

#[derive(Debug, Clone)]
pub struct FoldGrads {
    pub flow: Vec<Tensor>,
    pub mu: f64,
    pub rho: f64,
}

impl NetGrads {
    /// Adds `other` in place, fold by fold.
    pub fn add(&mut self, other: &NetGrads) -> Result<()> {
        for (a, b) in self.folds.iter_mut().zip(&other.folds) {
            for (ga, gb) in a.flow.iter_mut().zip(&b.flow) {
                ga.add_assign(gb)?;
            }
            a.mu += b.mu;
            a.rho += b.rho;
        }
        Ok(())
    }
}

struct FoldTape {
    residual: Tensor,
    forward: FlowTape,
    z_tilde: Tensor,
    inverse: InverseTape,
}

/// Activations of one [`UnrolledNet::forward_tape`] pass.
pub struct NetTape {
    init: InverseTape,
    folds: Vec<FoldTape>,
}

/// `K` folds with untied flows.
#[derive(Debug, Clone)]
pub struct UnrolledNet {
    folds: Vec<Fold>,
}

impl UnrolledNet {
    /// `k` independent copies of `flow`, each with the given initial `μ`, `λ`.
    pub fn from_flow(flow: &FlowModel, k: usize, mu: f64, lambda: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("the network needs at least one fold".into()));
        }
        if !flow.is_initialized() {
            return Err(Error::Config("fold flows must be initialized".into()));
        }
        Ok(Self {
            folds: (0..k).map(|_| Fold::new(flow.clone(), mu, lambda)).collect(),
        })
    }

    pub fn from_folds(folds: Vec<Fold>) -> Result<Self> {
        let first = folds
            .first()
            .ok_or_else(|| Error::Config("the network needs at least one fold".into()))?;
        for f in &folds[1..] {
            first.flow.check_compatible(&f.flow)?;
        }
        Ok(Self { folds })
    }

    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    pub fn folds_mut(&mut self) -> &mut [Fold] {
        &mut self.folds
    }

    pub fn signal_shape(&self) -> [usize; 3] {
        self.folds[0].flow.input_shape()
    }

    /// `g₀(0)`, the most likely image under fold 0's flow.
    pub fn initial_guess(&self) -> Result<Tensor> {
        let flow = &self.folds[0].flow;
        flow.inverse(&Tensor::zeros(&[flow.dim()]))
    }

    fn check_measurement(&self, y: &Tensor, op: &ForwardOp) -> Result<()> {
        y.check_shape("reconstruct", &self.signal_shape())?;
        if op.shape() != self.signal_shape() {
            return Err(Error::ShapeMismatch {
                op: "reconstruct (operator)",
                expected: self.signal_shape().to_vec(),
                found: op.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn reconstruct(&self, y: &Tensor, op: &ForwardOp) -> Result<Tensor> {
        Ok(self.reconstruct_trace(y, op)?.pop().expect("at least one fold"))
    }

    /// Signal-space iterates `x¹, …, x^K = x̂` (one per fold).
    pub fn reconstruct_trace(&self, y: &Tensor, op: &ForwardOp) -> Result<Vec<Tensor>> {
        self.check_measurement(y, op)?;
        let mut x = self.initial_guess()?;
        let last = self.folds.len() - 1;
        let mut trace = Vec::with_capacity(self.folds.len());
        for (k, fold) in self.folds.iter().enumerate() {
            let x_tilde = dc_step(&x, y, op, fold.mu())?;
            let (z_tilde, _) = fold.flow.forward(&x_tilde)?;
            let z = if k < last {
                prox_shrink(&z_tilde, fold.lambda())?
            } else {
                z_tilde
            };
            x = fold.flow.inverse(&z)?;
            trace.push(x.clone());
        }
        Ok(trace)
    }

    /// [`Self::reconstruct`] with the activations needed by [`Self::backward`].
    pub fn forward_tape(&self, y: &Tensor, op: &ForwardOp) -> Result<(Tensor, NetTape)> {
        self.check_measurement(y, op)?;
        let flow0 = &self.folds[0].flow;
        let (mut x, init) = flow0.inverse_tape(&Tensor::zeros(&[flow0.dim()]))?;
        let last = self.folds.len() - 1;
        let mut tapes = Vec::with_capacity(self.folds.len());
        for (k, fold) in self.folds.iter().enumerate() {
            let residual = op.adjoint(&y.sub(&op.apply(&x)?)?)?;
            let mut x_tilde = x;
            x_tilde.axpy(fold.mu(), &residual)?;
            let (z_tilde, _, forward) = fold.flow.forward_tape(&x_tilde)?;
            let z = if k < last {
                z_tilde.scale(1.0 / (1.0 + fold.lambda()))
            } else {
                z_tilde.clone()
            };
            let (x_next, inverse) = fold.flow.inverse_tape(&z)?;
            tapes.push(FoldTape {
                residual,
                forward,
                z_tilde,
                inverse,
            });
            x = x_next;
        }
        Ok((x, NetTape { init, folds: tapes }))
    }

    pub fn zero_grads_buffer(&self) -> NetGrads {
        NetGrads {
            folds: self
                .folds
                .iter()
                .map(|f| FoldGrads {
                    flow: f.flow.params().zero_grad_buffer(),
                    mu: 0.0,
                    rho: 0.0,
                })
                .collect(),
        }
    }

    /// Pulls `dL/dx̂` back through every fold and the initial guess.
    pub fn backward(&self, tape: &NetTape, op: &ForwardOp, dx_hat: &Tensor) -> Result<NetGrads> {
        let mut grads = self.zero_grads_buffer();
        let last = self.folds.len() - 1;
        let mut dx = dx_hat.clone();
        for k in (0..self.folds.len()).rev() {
            let fold = &self.folds[k];
            let ft = &tape.folds[k];
            let g = &mut grads.folds[k];
            let dz = fold.flow.inverse_backward(&ft.inverse, &dx, &mut g.flow)?;
            let dz_tilde = if k < last {
                let lambda = fold.lambda();
                let factor = 1.0 / (1.0 + lambda);
                let d_lambda = -dz.dot(&ft.z_tilde)? * factor * factor;
                g.rho += d_lambda * sigmoid(fold.rho());
                dz.scale(factor)
            } else {
                dz
            };
            let dx_tilde = fold.flow.forward_backward(&ft.forward, &dz_tilde, 0.0, &mut g.flow)?;
            g.mu += dx_tilde.dot(&ft.residual)?;
            // ∂x̃/∂x = I − μ AᵀA (symmetric).
            dx = dx_tilde.clone();
            dx.axpy(-fold.mu(), &op.normal(&dx_tilde)?)?;
        }
        self.folds[0]
            .flow
            .inverse_backward(&tape.init, &dx, &mut grads.folds[0].flow)?;
        Ok(grads)
    }

    /// Adds a gradient buffer into the parameter accumulators.
    pub fn accumulate(&mut self, grads: &NetGrads) -> Result<()> {
        if grads.folds.len() != self.folds.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "gradient buffer has {} folds, net has {}",
                grads.folds.len(),
                self.folds.len()
            )));
        }
        for (fold, g) in self.folds.iter_mut().zip(&grads.folds) {
            fold.flow.params_mut().accumulate(&g.flow)?;
            fold.scalars.grad_mut(MU).data_mut()[0] += g.mu;
            fold.scalars.grad_mut(RHO).data_mut()[0] += g.rho;
        }
        Ok(())
    }
}

impl Parameters for UnrolledNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, &Tensor)) {
        for (k, fold) in self.folds.iter().enumerate() {
            fold.flow
                .visit(&mut |name, v, g| f(&format!("fold{k}.{name}"), v, g));
            fold.scalars
                .visit(&mut |name, v, g| f(&format!("fold{k}.{name}"), v, g));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor)) {
        for (k, fold) in self.folds.iter_mut().enumerate() {
            fold.flow
                .visit_mut(&mut |name, v, g| f(&format!("fold{k}.{name}"), v, g));
            fold.scalars
                .visit_mut(&mut |name, v, g| f(&format!("fold{k}.{name}"), v, g));
        }
    }
}

/// Negative log posterior `‖y − A x‖²/(2σ²) − log p(x)`.
pub fn map_objective(
    x: &Tensor,
    y: &Tensor,
    op: &ForwardOp,
    sigma_n: f64,
    flow: &FlowModel,
) -> Result<f64> {
    if !(sigma_n > 0.0) {
        return Err(Error::Config(format!("sigma_n must be > 0, got {sigma_n}")));
    }
    let residual = y.sub(&op.apply(x)?)?;
    Ok(residual.norm_sq() / (2.0 * sigma_n * sigma_n) - flow.log_prob(x)?)
}

/// Latent objective `‖y − A g(z)‖² + λ‖z‖²`.
pub fn latent_objective(z: &Tensor, y: &Tensor, op: &ForwardOp, flow: &FlowModel, lambda: f64) -> Result<f64> {
    latent_objective_grad(z, y, op, flow, lambda, None)
}

/// [`latent_objective`] and, when `grads` is given, its gradient in `z`
/// accumulated there.
pub fn latent_objective_grad(
    z: &Tensor,
    y: &Tensor,
    op: &ForwardOp,
    flow: &FlowModel,
    lambda: f64,
    grads: Option<&mut Tensor>,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let (x, tape) = flow.inverse_tape(z)?;
    let residual = y.sub(&op.apply(&x)?)?;
    let value = residual.norm_sq() + lambda * z.norm_sq();
    if let Some(dz_out) = grads {
        let dx = op.adjoint(&residual)?.scale(-2.0);
        let mut scratch = flow.params().zero_grad_buffer();
        let mut dz = flow.inverse_backward(&tape, &dx, &mut scratch)?;
        dz.axpy(2.0 * lambda, z)?;
        dz_out.add_assign(&dz)?;
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::numerics::{randn, Prng};

    #[test]
    fn dc_step_cases() {
        let op = ForwardOp::identity([1, 2, 2]);
        let x = Tensor::from_vec(&[1, 2, 2], alloc::vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = Tensor::full(&[1, 2, 2], 3.0);
        assert_eq!(dc_step(&x, &y, &op, 0.0).unwrap(), x);
        let zero = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(dc_step(&zero, &y, &op, 0.5).unwrap(), Tensor::full(&[1, 2, 2], 1.5));
        assert_eq!(dc_step(&x, &x, &op, 0.7).unwrap(), x);
        assert!(dc_step(&x, &Tensor::zeros(&[1, 2, 3]), &op, 0.5).is_err());
    }

    #[test]
    fn prox_cases() {
        let z = Tensor::from_vec(&[2], alloc::vec![2.0, -4.0]).unwrap();
        assert_eq!(prox_shrink(&z, 0.0).unwrap(), z);
        assert_eq!(prox_shrink(&z, 1.0).unwrap().data(), &[1.0, -2.0]);
        assert!(prox_shrink(&z, -0.1).is_err());
    }

    #[test]
    fn softplus_round_trip() {
        for lambda in [1e-3, 0.1, 1.0, 7.5, 40.0] {
            assert!((softplus(inverse_softplus(lambda)) - lambda).abs() < 1e-12 * lambda.max(1.0));
        }
        assert_eq!(inverse_softplus(0.0), RHO_FLOOR);
        assert_eq!(1.0 + softplus(RHO_FLOOR), 1.0);
    }

    #[test]
    fn untied_folds() {
        let mut rng = Prng::new(0);
        let flow = FlowModel::random(FlowConfig { levels: 1, depth: 1, hidden: 2 }, [1, 2, 2], 0.1, &mut rng)
            .unwrap();
        let mut net = UnrolledNet::from_flow(&flow, 3, 0.5, 0.1).unwrap();
        let before: Vec<_> = net.folds()[1..].iter().map(|f| f.flow.params().clone()).collect();
        net.folds_mut()[0]
            .flow
            .params_mut()
            .value_mut(ParamId(0))
            .data_mut()[0] += 1.0;
        net.folds_mut()[0].set_mu(0.9);
        for (f, b) in net.folds()[1..].iter().zip(&before) {
            assert_eq!(f.flow.params(), b);
            assert_eq!(f.mu(), 0.5);
        }
    }

    #[test]
    fn identity_pipeline_returns_measurement() {
        let mut rng = Prng::new(1);
        let flow = FlowModel::identity(FlowConfig { levels: 1, depth: 2, hidden: 4 }, [1, 4, 4], &mut rng)
            .unwrap();
        let net = UnrolledNet::from_flow(&flow, 3, 1.0, 0.0).unwrap();
        let y = randn(&[1, 4, 4], 0.3, &mut rng);
        let op = ForwardOp::identity([1, 4, 4]);
        assert_eq!(net.initial_guess().unwrap(), Tensor::zeros(&[1, 4, 4]));
        assert_eq!(net.reconstruct(&y, &op).unwrap(), y);
    }

    #[test]
    fn objectives_at_trivial_points() {
        let mut rng = Prng::new(2);
        let flow = FlowModel::identity(FlowConfig { levels: 1, depth: 1, hidden: 2 }, [3, 2, 2], &mut rng)
            .unwrap();
        let op = ForwardOp::identity([3, 2, 2]);
        let zero = Tensor::zeros(&[3, 2, 2]);
        let v = map_objective(&zero, &zero, &op, 1.0, &flow).unwrap();
        assert!((v - 11.027_262_398_456_072).abs() < 1e-9, "{v}");
        assert!(map_objective(&zero, &zero, &op, 0.0, &flow).is_err());

        let z0 = Tensor::zeros(&[12]);
        let y = flow.inverse(&z0).unwrap();
        assert_eq!(latent_objective(&z0, &y, &op, &flow, 0.3).unwrap(), 0.0);
        let mut z = Tensor::zeros(&[12]);
        z.data_mut()[0] = 2.0;
        let y = op.apply(&flow.inverse(&z).unwrap()).unwrap();
        assert_eq!(latent_objective(&z, &y, &op, &flow, 0.5).unwrap(), 2.0);
    }
}
