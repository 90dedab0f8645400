use alloc::format;
use alloc::vec::Vec;

use super::actnorm::ActNorm;
use super::coupling::{AffineCoupling, CouplingContext};
use super::invconv::{InvConv1x1, InvConvContext};
use super::squeeze::{concat_channels, split_channels, squeeze, unsqueeze};
use super::{gaussian_log_norm, Bijector};
use crate::diff::{GradRule, ParamId, ParamStore, Parameters};
use crate::error::{Error, Result};
use crate::numerics::{identity, randn, random_rotation, Prng, Tensor};

/// Architecture of a [`FlowModel`].
///
/// `levels = 0` is a single stage of `depth` steps on the raw input (no
/// squeeze), which requires an even channel count. Otherwise every level
/// starts with a squeeze and every level but the last splits off half of
/// its channels into the latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub levels: usize,
    pub depth: usize,
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            depth: 4,
            hidden: 16,
        }
    }
}

#[derive(Debug, Clone)]
struct FlowStep {
    actnorm: ActNorm,
    invconv: InvConv1x1,
    coupling: AffineCoupling,
}

#[derive(Debug, Clone)]
struct Stage {
    squeeze: bool,
    /// Shape seen by the steps (after the optional squeeze).
    shape: [usize; 3],
    steps: Vec<FlowStep>,
    split: bool,
}

impl Stage {
    fn emitted_len(&self) -> usize {
        if self.split {
            (self.shape[0] - self.shape[0] / 2) * self.shape[1] * self.shape[2]
        } else {
            0
        }
    }
}

struct StepTape {
    actnorm: Tensor,
    invconv: InvConvContext,
    coupling: CouplingContext,
}

/// Activations stored by [`FlowModel::forward_tape`].
pub struct FlowTape {
    stages: Vec<Vec<StepTape>>,
    layer_logdets: Vec<f64>,
}

impl FlowTape {
    /// Log-det contribution of every layer in forward order.
    pub fn layer_logdets(&self) -> &[f64] {
        &self.layer_logdets
    }
}

/// Activations stored by [`FlowModel::inverse_tape`], in execution order.
pub struct InverseTape {
    stages: Vec<Vec<StepTape>>,
}

/// Invertible map `f: image -> latent` with inverse `g`, exact log-det and
/// log-likelihood under a standard normal base density.
///
/// The latent is the concatenation of the halves split off after each
/// non-final level followed by the final level's output, each flattened in
/// channel-major order.
#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    input_shape: [usize; 3],
    params: ParamStore,
    stages: Vec<Stage>,
    initialized: bool,
}

enum Init<'a> {
    /// Data-init pending: actnorm zero, random rotations.
    Fresh(&'a mut Prng),
    /// Exact identity map.
    Identity(&'a mut Prng),
    /// Every parameter randomly perturbed with the given scale.
    Random(&'a mut Prng, f64),
}

impl FlowModel {
    /// Model awaiting [`Self::actnorm_data_init`]: zero actnorm parameters,
    /// random rotations for the 1×1 convolutions and a zero output
    /// convolution in every coupling, so the coupling starts as the identity.
    pub fn new(config: FlowConfig, input_shape: [usize; 3], rng: &mut Prng) -> Result<Self> {
        Self::build(config, input_shape, Init::Fresh(rng), false)
    }

    /// The identity map: zero actnorm, identity 1×1 weights, zero coupling
    /// output. Marked initialized.
    pub fn identity(config: FlowConfig, input_shape: [usize; 3], rng: &mut Prng) -> Result<Self> {
        Self::build(config, input_shape, Init::Identity(rng), true)
    }

    /// A generic invertible model with every parameter randomized, for
    /// testing. `scale` controls the perturbation size.
    pub fn random(
        config: FlowConfig,
        input_shape: [usize; 3],
        scale: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        Self::build(config, input_shape, Init::Random(rng, scale), true)
    }

    fn build(config: FlowConfig, input_shape: [usize; 3], mut init: Init, initialized: bool) -> Result<Self> {
        let [c, h, w] = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty input shape {input_shape:?}")));
        }
        if config.depth == 0 || config.hidden == 0 {
            return Err(Error::Config("flow depth and hidden width must be positive".into()));
        }
        let factor = 1usize << config.levels;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "spatial dims {h}x{w} are not divisible by 2^levels = {factor}"
            )));
        }
        if config.levels == 0 && c % 2 != 0 {
            return Err(Error::Config(format!(
                "a flow without squeeze levels needs an even channel count, got {c}"
            )));
        }

        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut shape = input_shape;
        let n_stages = config.levels.max(1);
        for level in 0..n_stages {
            let squeeze = config.levels > 0;
            if squeeze {
                shape = [shape[0] * 4, shape[1] / 2, shape[2] / 2];
            }
            let ch = shape[0];
            let mut steps = Vec::with_capacity(config.depth);
            for d in 0..config.depth {
                let prefix = format!("level{level}.step{d}");
                steps.push(Self::make_step(&mut params, &prefix, ch, config.hidden, &mut init)?);
            }
            let split = level + 1 < n_stages;
            stages.push(Stage {
                squeeze,
                shape,
                steps,
                split,
            });
            if split {
                shape = [ch / 2, shape[1], shape[2]];
            }
        }
        Ok(Self {
            config,
            input_shape,
            params,
            stages,
            initialized,
        })
    }

    fn make_step(
        params: &mut ParamStore,
        prefix: &str,
        ch: usize,
        hidden: usize,
        init: &mut Init,
    ) -> Result<FlowStep> {
        let half = ch / 2;
        let cond = ch - half;
        let he = libm::sqrt(2.0 / (cond * 9) as f64);
        let zero_output = || (Tensor::zeros(&[2 * half, hidden, 3, 3]), Tensor::zeros(&[2 * half]));
        let (log_scale, bias, weight, w1, b1, (w2, b2)) = match init {
            Init::Fresh(rng) => (
                Tensor::zeros(&[ch]),
                Tensor::zeros(&[ch]),
                random_rotation(ch, rng),
                randn(&[hidden, cond, 3, 3], he, rng),
                Tensor::zeros(&[hidden]),
                zero_output(),
            ),
            Init::Identity(rng) => (
                Tensor::zeros(&[ch]),
                Tensor::zeros(&[ch]),
                identity(ch),
                randn(&[hidden, cond, 3, 3], he, rng),
                Tensor::zeros(&[hidden]),
                zero_output(),
            ),
            Init::Random(rng, scale) => {
                let s = *scale;
                let mut weight = random_rotation(ch, rng);
                weight.add_assign(&randn(&[ch, ch], s / libm::sqrt(ch as f64), rng))?;
                let out_scale = s / libm::sqrt((hidden * 9) as f64);
                (
                    randn(&[ch], s, rng),
                    randn(&[ch], s, rng),
                    weight,
                    randn(&[hidden, cond, 3, 3], he, rng),
                    randn(&[hidden], s, rng),
                    (randn(&[2 * half, hidden, 3, 3], out_scale, rng), randn(&[2 * half], s, rng)),
                )
            }
        };
        Ok(FlowStep {
            actnorm: ActNorm {
                log_scale: params.insert(format!("{prefix}.actnorm.log_scale"), log_scale)?,
                bias: params.insert(format!("{prefix}.actnorm.bias"), bias)?,
            },
            invconv: InvConv1x1 {
                weight: params.insert(format!("{prefix}.invconv.weight"), weight)?,
            },
            coupling: AffineCoupling {
                conv1_weight: params.insert(format!("{prefix}.coupling.conv1.weight"), w1)?,
                conv1_bias: params.insert(format!("{prefix}.coupling.conv1.bias"), b1)?,
                conv2_weight: params.insert(format!("{prefix}.coupling.conv2.weight"), w2)?,
                conv2_bias: params.insert(format!("{prefix}.coupling.conv2.bias"), b2)?,
            },
        })
    }

    pub fn config(&self) -> FlowConfig {
        self.config
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Signal (and latent) dimensionality `n = C·H·W`.
    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks actnorm parameters as set (e.g. after loading a checkpoint).
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Ids of every actnorm `(log_scale, bias)` pair in forward order.
    pub fn actnorm_params(&self) -> Vec<(ParamId, ParamId)> {
        self.stages
            .iter()
            .flat_map(|s| s.steps.iter().map(|st| (st.actnorm.log_scale, st.actnorm.bias)))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.check_shape("flow_forward", &self.input_shape)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        let (z, logdet, _) = self.forward_tape(x)?;
        Ok((z, logdet))
    }

    /// `f(x)` together with the activations needed by [`Self::forward_backward`].
    pub fn forward_tape(&self, x: &Tensor) -> Result<(Tensor, f64, FlowTape)> {
        self.check_input(x)?;
        let p = self.params.values();
        let mut h = x.clone();
        let mut latents: Vec<f64> = Vec::with_capacity(self.dim());
        let mut stage_tapes = Vec::with_capacity(self.stages.len());
        let mut layer_logdets = Vec::new();
        let mut finals = Vec::new();
        for stage in &self.stages {
            if stage.squeeze {
                h = squeeze(&h)?;
            }
            let mut tapes = Vec::with_capacity(stage.steps.len());
            for step in &stage.steps {
                let (a, ld_a, actnorm) = step.actnorm.forward(p, &h)?;
                let (b, ld_b, invconv) = step.invconv.forward(p, &a)?;
                let (c, ld_c, coupling) = step.coupling.forward(p, &b)?;
                layer_logdets.extend([ld_a, ld_b, ld_c]);
                tapes.push(StepTape {
                    actnorm,
                    invconv,
                    coupling,
                });
                h = c;
            }
            stage_tapes.push(tapes);
            if stage.split {
                let (keep, out) = split_channels(&h, stage.shape[0] / 2)?;
                latents.extend_from_slice(out.data());
                h = keep;
            } else {
                finals.extend_from_slice(h.data());
            }
        }
        latents.extend_from_slice(&finals);
        let logdet = layer_logdets.iter().sum();
        let n = latents.len();
        Ok((
            Tensor::from_vec(&[n], latents)?,
            logdet,
            FlowTape {
                stages: stage_tapes,
                layer_logdets,
            },
        ))
    }

    /// Pulls `(dL/dz, dL/dlogdet)` back to `dL/dx`, accumulating parameter
    /// gradients into `grads` (laid out like [`Self::params`]).
    pub fn forward_backward(
        &self,
        tape: &FlowTape,
        dz: &Tensor,
        dlogdet: f64,
        grads: &mut [Tensor],
    ) -> Result<Tensor> {
        dz.check_shape("flow_forward_backward", &[self.dim()])?;
        let p = self.params.values();
        let pieces = self.split_latent(dz)?;
        let mut dh = pieces.last().cloned().expect("at least one stage");
        for (si, stage) in self.stages.iter().enumerate().rev() {
            if stage.split {
                dh = concat_channels(&dh, &pieces[si])?;
            }
            for (step, t) in stage.steps.iter().zip(&tape.stages[si]).rev() {
                dh = step.coupling.backward(p, grads, &t.coupling, &dh, dlogdet)?;
                dh = step.invconv.backward(p, grads, &t.invconv, &dh, dlogdet)?;
                dh = step.actnorm.backward(p, grads, &t.actnorm, &dh, dlogdet)?;
            }
            if stage.squeeze {
                dh = unsqueeze(&dh)?;
            }
        }
        Ok(dh)
    }

    /// Latent pieces as tensors: split-off halves per split stage (empty
    /// placeholder for the others) and the final-stage output last.
    fn split_latent(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let mut pieces = Vec::with_capacity(self.stages.len() + 1);
        let mut offset = 0;
        let data = z.data();
        for stage in &self.stages {
            let len = stage.emitted_len();
            if stage.split {
                let shape = [stage.shape[0] - stage.shape[0] / 2, stage.shape[1], stage.shape[2]];
                pieces.push(Tensor::from_vec(&shape, data[offset..offset + len].to_vec())?);
            } else {
                pieces.push(Tensor::zeros(&[0]));
            }
            offset += len;
        }
        let last = self.stages.last().expect("at least one stage");
        let final_shape = if last.split {
            unreachable!("the last stage never splits")
        } else {
            last.shape
        };
        pieces.push(Tensor::from_vec(&final_shape, data[offset..].to_vec())?);
        Ok(pieces)
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.inverse_tape(z)?.0)
    }

    /// `g(z)` together with the activations needed by [`Self::inverse_backward`].
    pub fn inverse_tape(&self, z: &Tensor) -> Result<(Tensor, InverseTape)> {
        z.check_shape("flow_inverse", &[self.dim()])?;
        let p = self.params.values();
        let pieces = self.split_latent(z)?;
        let mut h = pieces.last().cloned().expect("at least one stage");
        let mut stage_tapes: Vec<Vec<StepTape>> = Vec::with_capacity(self.stages.len());
        for (si, stage) in self.stages.iter().enumerate().rev() {
            if stage.split {
                h = concat_channels(&h, &pieces[si])?;
            }
            let mut tapes = Vec::with_capacity(stage.steps.len());
            for step in stage.steps.iter().rev() {
                let (b, coupling) = step.coupling.inverse(p, &h)?;
                let (a, invconv) = step.invconv.inverse(p, &b)?;
                let (x, actnorm) = step.actnorm.inverse(p, &a)?;
                tapes.push(StepTape {
                    actnorm,
                    invconv,
                    coupling,
                });
                h = x;
            }
            stage_tapes.push(tapes);
            if stage.squeeze {
                h = unsqueeze(&h)?;
            }
        }
        Ok((h, InverseTape { stages: stage_tapes }))
    }

    /// Pulls `dL/dx` for `x = g(z)` back to `dL/dz`, accumulating parameter
    /// gradients into `grads`.
    pub fn inverse_backward(&self, tape: &InverseTape, dx: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        dx.check_shape("flow_inverse_backward", &self.input_shape)?;
        let p = self.params.values();
        let mut dz: Vec<f64> = Vec::with_capacity(self.dim());
        let mut dh = dx.clone();
        let n_stages = self.stages.len();
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.squeeze {
                dh = squeeze(&dh)?;
            }
            // The tape was recorded last stage first, last step first.
            let tapes = &tape.stages[n_stages - 1 - si];
            for (step, t) in stage.steps.iter().zip(tapes.iter().rev()) {
                dh = step.actnorm.inverse_backward(p, grads, &t.actnorm, &dh)?;
                dh = step.invconv.inverse_backward(p, grads, &t.invconv, &dh)?;
                dh = step.coupling.inverse_backward(p, grads, &t.coupling, &dh)?;
            }
            if stage.split {
                let (keep, out) = split_channels(&dh, stage.shape[0] / 2)?;
                dz.extend_from_slice(out.data());
                dh = keep;
            }
        }
        dz.extend_from_slice(dh.data());
        let n = dz.len();
        Tensor::from_vec(&[n], dz)
    }

    /// `log p(x) = log N(f(x); 0, I) + log|det Df(x)|`.
    pub fn log_prob(&self, x: &Tensor) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        Ok(gaussian_log_norm(z.len()) - 0.5 * z.norm_sq() + logdet)
    }

    /// Data-dependent actnorm initialization: each actnorm is set so that its
    /// output has zero mean and unit variance per channel over `batch`
    /// (population statistics, std floored at `1e-6`).
    pub fn actnorm_data_init(&mut self, batch: &[Tensor]) -> Result<()> {
        if self.initialized {
            return Err(Error::AlreadyInitialized);
        }
        if batch.len() < 2 {
            return Err(Error::Config(format!(
                "actnorm data init needs a batch of at least 2, got {}",
                batch.len()
            )));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let mut hs: Vec<Tensor> = batch.to_vec();
        for si in 0..self.stages.len() {
            if self.stages[si].squeeze {
                hs = hs.iter().map(squeeze).collect::<Result<_>>()?;
            }
            for di in 0..self.stages[si].steps.len() {
                let step = self.stages[si].steps[di].clone();
                let stats = ActNorm::channel_stats(&hs);
                {
                    let bias = self.params.value_mut(step.actnorm.bias);
                    for (b, &(mean, _)) in bias.data_mut().iter_mut().zip(&stats) {
                        *b = -mean;
                    }
                }
                {
                    let log_scale = self.params.value_mut(step.actnorm.log_scale);
                    for (s, &(_, std)) in log_scale.data_mut().iter_mut().zip(&stats) {
                        *s = -libm::log(std.max(1e-6));
                    }
                }
                let p = self.params.values();
                hs = hs
                    .iter()
                    .map(|h| {
                        let (a, _, _) = step.actnorm.forward(p, h)?;
                        let (b, _, _) = step.invconv.forward(p, &a)?;
                        let (c, _, _) = step.coupling.forward(p, &b)?;
                        Ok(c)
                    })
                    .collect::<Result<_>>()?;
            }
            if self.stages[si].split {
                let keep = self.stages[si].shape[0] / 2;
                hs = hs
                    .iter()
                    .map(|h| Ok(split_channels(h, keep)?.0))
                    .collect::<Result<_>>()?;
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Output of the first actnorm layer (after the first squeeze), for
    /// checking the data-dependent initialization.
    pub fn first_actnorm_output(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let stage = &self.stages[0];
        let h = if stage.squeeze { squeeze(x)? } else { x.clone() };
        Ok(stage.steps[0].actnorm.forward(self.params.values(), &h)?.0)
    }

    /// Verifies that `other` has identical architecture and parameter layout.
    pub fn check_compatible(&self, other: &FlowModel) -> Result<()> {
        if self.config != other.config || self.input_shape != other.input_shape {
            return Err(Error::ArchitectureMismatch(format!(
                "{:?} on {:?} vs {:?} on {:?}",
                self.config, self.input_shape, other.config, other.input_shape
            )));
        }
        Ok(())
    }
}

impl Parameters for FlowModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, &Tensor)) {
        self.params.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor)) {
        self.params.visit_mut(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(levels: usize, depth: usize) -> FlowConfig {
        FlowConfig {
            levels,
            depth,
            hidden: 4,
        }
    }

    #[test]
    fn rejects_indivisible_dims() {
        let mut rng = Prng::new(0);
        assert!(FlowModel::new(cfg(2, 1), [1, 6, 8], &mut rng).is_err());
        assert!(FlowModel::new(cfg(0, 1), [3, 2, 2], &mut rng).is_err());
        assert!(FlowModel::new(cfg(1, 0), [1, 2, 2], &mut rng).is_err());
    }

    #[test]
    fn identity_model_is_permutation_with_zero_logdet() {
        let mut rng = Prng::new(1);
        let flow = FlowModel::identity(cfg(1, 2), [1, 2, 2], &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 2, 2], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (z, logdet) = flow.forward(&x).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(logdet, 0.0);
    }

    #[test]
    fn latent_layout_with_split() {
        let mut rng = Prng::new(2);
        let flow = FlowModel::identity(cfg(2, 1), [1, 4, 4], &mut rng).unwrap();
        let x = randn(&[1, 4, 4], 1.0, &mut rng);
        let (z, _) = flow.forward(&x).unwrap();
        // level 0: squeeze to 4x2x2, emit channels 2..4 (8 values) first.
        let s = squeeze(&x).unwrap();
        assert_eq!(&z.data()[..8], &s.data()[8..]);
        let kept = split_channels(&s, 2).unwrap().0;
        let s2 = squeeze(&kept).unwrap();
        assert_eq!(&z.data()[8..], s2.data());
    }

    #[test]
    fn data_init_twice_fails() {
        let mut rng = Prng::new(3);
        let mut flow = FlowModel::new(cfg(1, 2), [1, 4, 4], &mut rng).unwrap();
        let batch: Vec<Tensor> = (0..4).map(|_| randn(&[1, 4, 4], 1.0, &mut rng)).collect();
        flow.actnorm_data_init(&batch).unwrap();
        assert_eq!(flow.actnorm_data_init(&batch), Err(Error::AlreadyInitialized));
        let mut fresh = FlowModel::new(cfg(1, 2), [1, 4, 4], &mut rng).unwrap();
        assert!(fresh.actnorm_data_init(&batch[..1]).is_err());
    }

    #[test]
    fn zero_variance_channel_is_floored() {
        let mut rng = Prng::new(4);
        let mut flow = FlowModel::new(cfg(1, 1), [1, 2, 2], &mut rng).unwrap();
        let batch = alloc::vec![Tensor::full(&[1, 2, 2], 0.3); 3];
        flow.actnorm_data_init(&batch).unwrap();
        assert!(flow.params().values().iter().all(Tensor::is_finite));
    }
}
