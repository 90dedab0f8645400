use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::operators::{default_blur_radius, default_mask_width, ForwardOp, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Denoise,
    Inpaint,
    Deblur,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Inpaint => "inpaint",
            Task::Deblur => "deblur",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "inpaint" => Ok(Task::Inpaint),
            "deblur" => Ok(Task::Deblur),
            other => Err(Error::Config(alloc::format!(
                "unknown task `{other}` (expected denoise, inpaint or deblur)"
            ))),
        }
    }
}

/// Image side length below which the smaller default learning rate applies.
pub const SMALL_IMAGE: usize = 32;

/// Hyperparameters, task settings and seed of a run.
///
/// `None` fields are resolved from the image size or task: `sigma_n` is 0.1
/// for denoising and 0 otherwise, `mask_w` is `ceil(0.3·min(H, W))`,
/// `sigma_b` is `5·min(H, W)/64`, `blur_radius` is `ceil(3σ_b)` and `lr` is
/// 1e-5, or 1e-4 for images smaller than 32 pixels on a side.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub sigma_n: Option<f64>,
    pub mask_w: Option<usize>,
    pub sigma_b: Option<f64>,
    pub blur_radius: Option<usize>,
    pub folds: usize,
    pub flow: FlowConfig,
    pub lr: Option<f64>,
    pub scalar_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mu_init: f64,
    pub lambda_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Denoise,
            sigma_n: None,
            mask_w: None,
            sigma_b: None,
            blur_radius: None,
            folds: 5,
            flow: FlowConfig::default(),
            lr: None,
            scalar_lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 8,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            mu_init: 0.5,
            lambda_init: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(alloc::format!("{name} must be > 0, got {v}")))
            }
        };
        if let Some(lr) = self.lr {
            positive("lr", lr)?;
        }
        positive("scalar_lr", self.scalar_lr)?;
        positive("eps_adam", self.eps_adam)?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.folds == 0 {
            return Err(Error::Config("batch_size and folds must be >= 1".into()));
        }
        if let Some(s) = self.sigma_n {
            if !(s >= 0.0) {
                return Err(Error::Config(alloc::format!("sigma_n must be >= 0, got {s}")));
            }
        }
        if let Some(s) = self.sigma_b {
            positive("sigma_b", s)?;
        }
        if !(self.lambda_init >= 0.0) {
            return Err(Error::Config("lambda_init must be >= 0".into()));
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        self.sigma_n.unwrap_or(match self.task {
            Task::Denoise => 0.1,
            Task::Inpaint | Task::Deblur => 0.0,
        })
    }

    pub fn mask_width(&self, h: usize, w: usize) -> usize {
        self.mask_w.unwrap_or_else(|| default_mask_width(h, w))
    }

    pub fn blur_sigma(&self, h: usize, w: usize) -> f64 {
        self.sigma_b.unwrap_or(5.0 * h.min(w) as f64 / 64.0)
    }

    pub fn blur_support(&self, h: usize, w: usize) -> usize {
        self.blur_radius
            .unwrap_or_else(|| default_blur_radius(self.blur_sigma(h, w)))
    }

    pub fn learning_rate(&self, h: usize, w: usize) -> f64 {
        self.lr
            .unwrap_or(if h.min(w) < SMALL_IMAGE { 1e-4 } else { 1e-5 })
    }

    pub fn operator(&self, shape: [usize; 3]) -> Result<ForwardOp> {
        let [_, h, w] = shape;
        let kind = match self.task {
            Task::Denoise => OpKind::Identity,
            Task::Inpaint => OpKind::CenterMask {
                width: self.mask_width(h, w),
            },
            Task::Deblur => OpKind::GaussianBlur {
                sigma: self.blur_sigma(h, w),
                radius: self.blur_support(h, w),
            },
        };
        ForwardOp::new(kind, shape)
    }
}
