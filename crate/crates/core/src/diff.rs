//! Parameter storage, the per-layer reverse-mode contract, and a
//! finite-difference gradient checker.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Prng, Tensor};

/// Index of an entry inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameters with gradient accumulators, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(alloc::format!("duplicate parameter name `{name}`")));
        }
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Simultaneous read access to values and write access to gradients.
    pub fn split_mut(&mut self) -> (&[Tensor], &mut [Tensor]) {
        (&self.values, &mut self.grads)
    }

    /// A zeroed gradient buffer with this store's layout.
    pub fn zero_grad_buffer(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }

    /// Adds a gradient buffer produced by [`Self::zero_grad_buffer`].
    pub fn accumulate(&mut self, buffer: &[Tensor]) -> Result<()> {
        if buffer.len() != self.grads.len() {
            return Err(Error::ArchitectureMismatch(alloc::format!(
                "gradient buffer has {} entries, store has {}",
                buffer.len(),
                self.grads.len()
            )));
        }
        for (g, b) in self.grads.iter_mut().zip(buffer) {
            g.add_assign(b)?;
        }
        Ok(())
    }
}

/// Anything that exposes named `(value, grad)` pairs in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor));
}

impl Parameters for ParamStore {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, &Tensor)) {
        for ((n, v), g) in self.names.iter().zip(&self.values).zip(&self.grads) {
            f(n, v, g);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor)) {
        for ((n, v), g) in self
            .names
            .iter()
            .zip(self.values.iter_mut())
            .zip(self.grads.iter_mut())
        {
            f(n, v, g);
        }
    }
}

pub fn zero_grads<P: Parameters + ?Sized>(p: &mut P) {
    p.visit_mut(&mut |_, _, g| g.fill(0.0));
}

/// Number of scalar parameters.
pub fn param_count<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit(&mut |_, v, _| n += v.len());
    n
}

/// Reverse-mode rule for a layer `x -> (y, logdet)` whose parameters live in
/// a value slice, with gradients accumulated into a parallel slice.
///
/// `backward` must only read the context produced by the matching `forward`.
/// Layers without a volume term return `0.0` as their log-determinant.
pub trait GradRule {
    type Context;

    fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<(Tensor, f64, Self::Context)>;

    fn backward(
        &self,
        params: &[Tensor],
        grads: &mut [Tensor],
        ctx: &Self::Context,
        dy: &Tensor,
        dlogdet: f64,
    ) -> Result<Tensor>;
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// One probed scalar in a gradient check.
#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / 1f64.max(self.analytic.abs()).max(self.numeric.abs())
    }
}

/// Compares analytic against central-difference gradients at `probes`
/// randomly chosen scalars and returns the maximum relative error
/// `|a - n| / max(1, |a|, |n|)`.
///
/// `f` evaluates the objective and accumulates its gradient into `p`.
/// Probes are drawn by first picking an entry uniformly, then an element
/// within it, so small tensors (step sizes, shrinkage) are not starved.
pub fn grad_check<P, F>(p: &mut P, f: F, probes: usize, eps: f64, seed: u64) -> Result<f64>
where
    P: Parameters + ?Sized,
    F: FnMut(&mut P) -> Result<f64>,
{
    if probes == 0 {
        return Err(Error::Config("grad_check needs at least one probe".to_string()));
    }
    let sizes = entry_sizes(p);
    let candidates: Vec<usize> = (0..sizes.len()).filter(|&e| sizes[e] > 0).collect();
    if candidates.is_empty() {
        return Err(Error::Config("grad_check on an empty parameter set".to_string()));
    }
    let mut rng = Prng::new(seed);
    let picks: Vec<(usize, usize)> = (0..probes)
        .map(|_| {
            let e = candidates[rng.below(candidates.len())];
            (e, rng.below(sizes[e]))
        })
        .collect();
    let report = probe_gradients(p, f, &picks, eps)?;
    Ok(max_rel_error(&report))
}

/// Checks every scalar of every entry whose name satisfies `filter`.
pub fn grad_check_entries<P, F>(
    p: &mut P,
    f: F,
    filter: &dyn Fn(&str) -> bool,
    eps: f64,
) -> Result<Vec<Probe>>
where
    P: Parameters + ?Sized,
    F: FnMut(&mut P) -> Result<f64>,
{
    let mut picks = Vec::new();
    let mut e = 0;
    p.visit(&mut |name, v, _| {
        if filter(name) {
            picks.extend((0..v.len()).map(|i| (e, i)));
        }
        e += 1;
    });
    if picks.is_empty() {
        return Err(Error::Config("grad_check_entries: no parameter matched".to_string()));
    }
    probe_gradients(p, f, &picks, eps)
}

pub fn max_rel_error(probes: &[Probe]) -> f64 {
    probes.iter().map(Probe::rel_error).fold(0.0, f64::max)
}

fn entry_sizes<P: Parameters + ?Sized>(p: &P) -> Vec<usize> {
    let mut sizes = Vec::new();
    p.visit(&mut |_, v, _| sizes.push(v.len()));
    sizes
}

fn with_entry<P: Parameters + ?Sized, R>(
    p: &mut P,
    entry: usize,
    mut f: impl FnMut(&str, &mut Tensor, &mut Tensor) -> R,
) -> R {
    let mut e = 0;
    let mut out = None;
    p.visit_mut(&mut |name, v, g| {
        if e == entry {
            out = Some(f(name, v, g));
        }
        e += 1;
    });
    out.expect("entry index in range")
}

fn probe_gradients<P, F>(p: &mut P, mut f: F, picks: &[(usize, usize)], eps: f64) -> Result<Vec<Probe>>
where
    P: Parameters + ?Sized,
    F: FnMut(&mut P) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(alloc::format!(
            "finite-difference eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    zero_grads(p);
    let base = f(p)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            param: "<unperturbed>".to_string(),
        });
    }
    let mut analytic: Vec<Tensor> = Vec::new();
    p.visit(&mut |_, _, g| analytic.push(g.clone()));

    let mut report = Vec::with_capacity(picks.len());
    for &(entry, index) in picks {
        let (name, original) = with_entry(p, entry, |n, v, _| (n.to_string(), v.data()[index]));
        let mut eval_at = |p: &mut P, x: f64| -> Result<f64> {
            with_entry(p, entry, |_, v, _| v.data_mut()[index] = x);
            let value = f(p)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { param: name.clone() });
            }
            Ok(value)
        };
        let plus = eval_at(p, original + eps);
        let minus = eval_at(p, original - eps);
        with_entry(p, entry, |_, v, _| v.data_mut()[index] = original);
        let numeric = (plus? - minus?) / (2.0 * eps);
        report.push(Probe {
            name,
            index,
            analytic: analytic[entry].data()[index],
            numeric,
        });
    }
    // Restore the analytic gradient polluted by the probe evaluations.
    let mut e = 0;
    p.visit_mut(&mut |_, _, g| {
        *g = analytic[e].clone();
        e += 1;
    });
    Ok(report)
}
