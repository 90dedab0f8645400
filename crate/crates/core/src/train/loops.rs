use alloc::vec::Vec;

use super::adam::{adam_update, AdamState, LearningRates};
use super::config::TrainConfig;
use super::loss::{mse_loss, nll_loss, nll_loss_and_grad};
use crate::diff::zero_grads;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::{Prng, Tensor};
use crate::operators::{make_measurement, ForwardOp};
use crate::unfold::UnrolledNet;

/// Sub-stream tags for [`Prng::derive`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const VAL_NOISE: u64 = 4;
    pub const EVAL_NOISE: u64 = 5;
}

/// Seed for the measurement noise of sample `index` in a given stream/epoch.
pub fn noise_seed(seed: u64, stream: u64, epoch: u64, index: u64) -> u64 {
    Prng::derive_seed(seed, &[stream, epoch, index])
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Tracks the best validation loss and the state that produced it.
#[derive(Debug, Clone)]
pub struct EarlyStopping<T> {
    patience: usize,
    best: Option<(f64, usize, T)>,
    stale: usize,
}

impl<T: Clone> EarlyStopping<T> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns `false` once `patience` epochs passed
    /// without a strict improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64, state: &T) -> bool {
        let improved = loss.is_finite() && self.best.as_ref().is_none_or(|(b, _, _)| loss < *b);
        if improved {
            self.best = Some((loss, epoch, state.clone()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale < self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|(_, e, _)| *e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.as_ref().map(|(l, _, _)| *l)
    }

    pub fn into_best(self) -> Option<T> {
        self.best.map(|(_, _, s)| s)
    }
}

fn image_shape(images: &[Tensor]) -> Result<[usize; 3]> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let shape: [usize; 3] = first.shape().try_into().map_err(|_| Error::ShapeMismatch {
        op: "dataset",
        expected: alloc::vec![0, 0, 0],
        found: first.shape().to_vec(),
    })?;
    for x in images {
        x.check_shape("dataset", &shape)?;
    }
    Ok(shape)
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    Prng::derive(seed, &[stream::SHUFFLE, epoch as u64]).shuffle(&mut order);
    order
}

/// Maximum-likelihood pretraining of a single flow.
///
/// Actnorms are data-initialized on the first `batch_size` training images,
/// then Adam minimizes the per-dimension NLL. Returns the parameters of the
/// epoch with the lowest validation NLL (training NLL when `val` is empty).
pub fn pretrain(
    train: &[Tensor],
    val: &[Tensor],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FlowModel> {
    cfg.validate()?;
    let shape = image_shape(train)?;
    if !val.is_empty() {
        for x in val {
            x.check_shape("validation set", &shape)?;
        }
    }
    let mut rng = Prng::derive(cfg.seed, &[stream::INIT]);
    let mut flow = FlowModel::new(cfg.flow, shape, &mut rng)?;
    let init_batch = &train[..cfg.batch_size.max(2).min(train.len())];
    flow.actnorm_data_init(init_batch)?;
    if cfg.max_epochs == 0 {
        return Ok(flow);
    }

    let rates = LearningRates::uniform(cfg.learning_rate(shape[1], shape[2]));
    let mut adam = AdamState::new(cfg.beta1, cfg.beta2, cfg.eps_adam);
    let mut stopper = EarlyStopping::new(cfg.patience);
    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| train[i].clone()).collect();
            zero_grads(&mut flow);
            total += nll_loss_and_grad(&batch, &mut flow)? * chunk.len() as f64;
            adam_update(&mut flow, &mut adam, &rates)?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            nll_loss(train, &flow)?
        } else {
            nll_loss(val, &flow)?
        };
        observer(&EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if !stopper.observe(epoch, val_loss, &flow) {
            break;
        }
    }
    Ok(stopper.into_best().unwrap_or(flow))
}

/// Builds `cfg.folds` untied folds from `pretrained`, or from fresh identity
/// flows when `None`.
pub fn build_unrolled(
    shape: [usize; 3],
    cfg: &TrainConfig,
    pretrained: Option<&FlowModel>,
) -> Result<UnrolledNet> {
    let flow = match pretrained {
        Some(f) => {
            if f.config() != cfg.flow || f.input_shape() != shape {
                return Err(Error::ArchitectureMismatch(alloc::format!(
                    "pretrained flow is {:?} on {:?}, configuration asks for {:?} on {:?}",
                    f.config(),
                    f.input_shape(),
                    cfg.flow,
                    shape
                )));
            }
            f.clone()
        }
        None => FlowModel::identity(cfg.flow, shape, &mut Prng::derive(cfg.seed, &[stream::INIT]))?,
    };
    UnrolledNet::from_flow(&flow, cfg.folds, cfg.mu_init, cfg.lambda_init)
}

/// Mean test-time MSE of `net` over `images` with measurement noise drawn
/// from the given stream.
pub fn mean_reconstruction_mse(
    net: &UnrolledNet,
    images: &[Tensor],
    op: &ForwardOp,
    sigma_n: f64,
    seed: u64,
    noise_stream: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (i, x) in images.iter().enumerate() {
        let mut rng = Prng::new(noise_seed(seed, noise_stream, 0, i as u64));
        let y = make_measurement(op, x, sigma_n, &mut rng)?;
        total += mse_loss(&net.reconstruct(&y, op)?, x)?;
    }
    Ok(total / images.len() as f64)
}

/// End-to-end task training of the unrolled network on `(y, x)` pairs
/// synthesized on the fly, with fresh noise every epoch.
///
/// Returns the net from the epoch with the lowest validation MSE.
pub fn train_unrolled(
    train: &[Tensor],
    val: &[Tensor],
    cfg: &TrainConfig,
    pretrained: Option<&FlowModel>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<UnrolledNet> {
    cfg.validate()?;
    let shape = image_shape(train)?;
    for x in val {
        x.check_shape("validation set", &shape)?;
    }
    let mut net = build_unrolled(shape, cfg, pretrained)?;
    if cfg.max_epochs == 0 {
        return Ok(net);
    }
    let op = cfg.operator(shape)?;
    let sigma_n = cfg.noise_std();
    let rates = LearningRates {
        default: cfg.learning_rate(shape[1], shape[2]),
        scalar: cfg.scalar_lr,
    };
    let n = shape.iter().product::<usize>();
    let mut adam = AdamState::new(cfg.beta1, cfg.beta2, cfg.eps_adam);
    let mut stopper = EarlyStopping::new(cfg.patience);
    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            zero_grads(&mut net);
            let scale = 2.0 / (chunk.len() * n) as f64;
            let mut batch_grads = net.zero_grads_buffer();
            for &i in chunk {
                let x = &train[i];
                let mut rng =
                    Prng::new(noise_seed(cfg.seed, stream::TRAIN_NOISE, epoch as u64, i as u64));
                let y = make_measurement(&op, x, sigma_n, &mut rng)?;
                let (x_hat, tape) = net.forward_tape(&y, &op)?;
                let err = x_hat.sub(x)?;
                total += err.norm_sq() / n as f64;
                let g = net.backward(&tape, &op, &err.scale(scale))?;
                batch_grads.add(&g)?;
            }
            net.accumulate(&batch_grads)?;
            adam_update(&mut net, &mut adam, &rates)?;
        }
        let train_loss = total / train.len() as f64;
        let (eval_set, stream_id) = if val.is_empty() {
            (train, stream::TRAIN_NOISE)
        } else {
            (val, stream::VAL_NOISE)
        };
        let val_loss = mean_reconstruction_mse(&net, eval_set, &op, sigma_n, cfg.seed, stream_id)?;
        observer(&EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if !stopper.observe(epoch, val_loss, &net) {
            break;
        }
    }
    Ok(stopper.into_best().unwrap_or(net))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_keeps_best_not_last() {
        let losses = [5.0, 3.0, 4.0, 2.5, 2.6, 2.7, 1.0];
        let mut stopper = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (i, &l) in losses.iter().enumerate() {
            let epoch = i + 1;
            if !stopper.observe(epoch, l, &epoch) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(stopper.best_epoch(), Some(4));
        assert_eq!(stopper.best_loss(), Some(2.5));
        assert_eq!(stopper.into_best(), Some(4));
    }

    #[test]
    fn plateau_with_patience_one_stops_immediately() {
        let mut stopper = EarlyStopping::new(1);
        assert!(stopper.observe(1, 1.0, &()));
        assert!(!stopper.observe(2, 1.0, &()));
    }

    #[test]
    fn nan_never_counts_as_best() {
        let mut stopper = EarlyStopping::new(3);
        stopper.observe(1, f64::NAN, &1);
        stopper.observe(2, 4.0, &2);
        assert_eq!(stopper.into_best(), Some(2));
    }

    #[test]
    fn empty_training_set() {
        let cfg = TrainConfig::default();
        assert_eq!(pretrain(&[], &[], &cfg, &mut |_| {}).unwrap_err(), Error::EmptyDataset);
        assert_eq!(
            train_unrolled(&[], &[], &cfg, None, &mut |_| {}).unwrap_err(),
            Error::EmptyDataset
        );
    }
}
