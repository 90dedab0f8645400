use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::diff::Parameters;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Learning rate per parameter: names ending in `.mu`/`.rho` (or equal to
/// `mu`/`rho`) use `scalar`, everything else `default`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub default: f64,
    pub scalar: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            default: lr,
            scalar: lr,
        }
    }

    pub fn rate_for(&self, name: &str) -> f64 {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if leaf == "mu" || leaf == "rho" {
            self.scalar
        } else {
            self.default
        }
    }
}

struct Moments {
    name: String,
    m: Tensor,
    v: Tensor,
}

/// First/second moment estimates mirroring a parameter set.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam step over every parameter, then zeroes the
/// gradients.
pub fn adam_update<P: Parameters + ?Sized>(
    p: &mut P,
    state: &mut AdamState,
    rates: &LearningRates,
) -> Result<()> {
    if state.moments.is_empty() {
        p.visit(&mut |name, v, _| {
            state.moments.push(Moments {
                name: name.to_string(),
                m: Tensor::zeros(v.shape()),
                v: Tensor::zeros(v.shape()),
            })
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    let mut idx = 0;
    let mut mismatch: Option<String> = None;
    p.visit_mut(&mut |name, value, grad| {
        let Some(mo) = state.moments.get_mut(idx) else {
            mismatch.get_or_insert_with(|| name.to_string());
            return;
        };
        idx += 1;
        if mo.name != name || mo.m.shape() != value.shape() {
            mismatch.get_or_insert_with(|| name.to_string());
            return;
        }
        let lr = rates.rate_for(name);
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
        grad.fill(0.0);
    });
    if mismatch.is_none() && idx != state.moments.len() {
        mismatch = Some("<missing entries>".to_string());
    }
    match mismatch {
        Some(name) => Err(Error::ArchitectureMismatch(alloc::format!(
            "optimizer state does not match parameter `{name}`"
        ))),
        None => Ok(()),
    }
}
