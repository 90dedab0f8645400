//! Losses, the Adam optimizer, pretraining and end-to-end fine-tuning.

mod adam;
mod config;
mod loops;
mod loss;

pub use adam::{adam_update, AdamState, LearningRates};
pub use config::{Task, TrainConfig, SMALL_IMAGE};
pub use loops::{
    build_unrolled, mean_reconstruction_mse, noise_seed, pretrain, stream, train_unrolled,
    EarlyStopping, EpochRecord,
};
pub use loss::{mse_loss, nll_loss, nll_loss_and_grad, psnr, psnr_from_mse, PSNR_CAP};
