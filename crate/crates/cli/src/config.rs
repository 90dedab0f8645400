//! `key = value` run configuration.
//!
//! ```text
//! # denoising on 16x16 blobs
//! task = denoise
//! K = 3
//! max_epochs = 20
//! ```
//!
//! Keys that are absent take their defaults; `auto` leaves a
//! size-dependent value to be resolved from the data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowprox_core::train::{Task, TrainConfig};

use crate::error::{CliError, Result};

/// Whether fine-tuning starts from a pretrained flow.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Checkpoint(PathBuf),
    Scratch,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pretrained: Option<Prior>,
}

pub const KEYS: &[&str] = &[
    "task",
    "sigma_n",
    "mask_w",
    "sigma_b",
    "blur_radius",
    "K",
    "L",
    "D",
    "hidden",
    "lr",
    "scalar_lr",
    "beta1",
    "beta2",
    "eps_adam",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "mu_init",
    "lambda_init",
    "data",
    "out",
    "pretrained",
];

fn parse_value<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value `{value}`: {e}"))
}

fn parse_auto<T: FromStr>(value: &str) -> std::result::Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(value).map(Some)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| CliError::ConfigSyntax {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| err(format!("unknown key `{key}`")))?;
            if seen.contains(known) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(known);
            cfg.set(key, value).map_err(err)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "task" => t.task = value.parse::<Task>().map_err(|e| e.to_string())?,
            "sigma_n" => t.sigma_n = parse_auto(value)?,
            "mask_w" => t.mask_w = parse_auto(value)?,
            "sigma_b" => t.sigma_b = parse_auto(value)?,
            "blur_radius" => t.blur_radius = parse_auto(value)?,
            "K" => t.folds = parse_value(value)?,
            "L" => t.flow.levels = parse_value(value)?,
            "D" => t.flow.depth = parse_value(value)?,
            "hidden" => t.flow.hidden = parse_value(value)?,
            "lr" => t.lr = parse_auto(value)?,
            "scalar_lr" => t.scalar_lr = parse_value(value)?,
            "beta1" => t.beta1 = parse_value(value)?,
            "beta2" => t.beta2 = parse_value(value)?,
            "eps_adam" => t.eps_adam = parse_value(value)?,
            "batch_size" => t.batch_size = parse_value(value)?,
            "max_epochs" => t.max_epochs = parse_value(value)?,
            "patience" => t.patience = parse_value(value)?,
            "seed" => t.seed = parse_value(value)?,
            "mu_init" => t.mu_init = parse_value(value)?,
            "lambda_init" => t.lambda_init = parse_value(value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "pretrained" => {
                self.pretrained = Some(if value == "none" {
                    Prior::Scratch
                } else {
                    Prior::Checkpoint(PathBuf::from(value))
                })
            }
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Every key with size-dependent values filled in for `[C, H, W]` images.
    pub fn render_resolved(&self, shape: [usize; 3]) -> String {
        let t = &self.train;
        let [_, h, w] = shape;
        let mut s = String::new();
        let _ = writeln!(s, "# resolved for {}x{}x{} images", shape[0], h, w);
        let _ = writeln!(s, "task = {}", t.task);
        let _ = writeln!(s, "sigma_n = {}", t.noise_std());
        let _ = writeln!(s, "mask_w = {}", t.mask_width(h, w));
        let _ = writeln!(s, "sigma_b = {}", t.blur_sigma(h, w));
        let _ = writeln!(s, "blur_radius = {}", t.blur_support(h, w));
        let _ = writeln!(s, "K = {}", t.folds);
        let _ = writeln!(s, "L = {}", t.flow.levels);
        let _ = writeln!(s, "D = {}", t.flow.depth);
        let _ = writeln!(s, "hidden = {}", t.flow.hidden);
        let _ = writeln!(s, "lr = {}", t.learning_rate(h, w));
        let _ = writeln!(s, "scalar_lr = {}", t.scalar_lr);
        let _ = writeln!(s, "beta1 = {}", t.beta1);
        let _ = writeln!(s, "beta2 = {}", t.beta2);
        let _ = writeln!(s, "eps_adam = {}", t.eps_adam);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "max_epochs = {}", t.max_epochs);
        let _ = writeln!(s, "patience = {}", t.patience);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "mu_init = {}", t.mu_init);
        let _ = writeln!(s, "lambda_init = {}", t.lambda_init);
        if let Some(p) = &self.data {
            let _ = writeln!(s, "data = {}", p.display());
        }
        if let Some(p) = &self.out {
            let _ = writeln!(s, "out = {}", p.display());
        }
        match &self.pretrained {
            Some(Prior::Checkpoint(p)) => {
                let _ = writeln!(s, "pretrained = {}", p.display());
            }
            Some(Prior::Scratch) => {
                let _ = writeln!(s, "pretrained = none");
            }
            None => {}
        }
        s
    }

    /// Writes [`Self::render_resolved`] as `resolved.cfg` into `dir`.
    pub fn write_resolved(&self, dir: &Path, shape: [usize; 3]) -> Result<PathBuf> {
        let path = dir.join("resolved.cfg");
        fs::write(&path, self.render_resolved(shape)).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
