//! Linear measurement operators `A` and the noisy measurement model
//! `y = A x + η`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{conv2d_circular, gaussian_kernel, Prng, Tensor};

/// Which degradation an operator models.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Identity,
    /// Zeroes a centered `w×w` window in every channel.
    CenterMask { width: usize },
    /// Per-channel circular convolution with a normalized Gaussian kernel.
    GaussianBlur { sigma: f64, radius: usize },
}

/// A linear operator on `C×H×W` images with its adjoint. Masked pixels are
/// measured as zeros, so `A` is square.
#[derive(Debug, Clone)]
pub struct ForwardOp {
    kind: OpKind,
    shape: [usize; 3],
    /// 0/1 mask over one `H×W` plane (center mask only).
    mask: Vec<f64>,
    /// Blur kernel as a `1×1×k×k` convolution weight.
    kernel: Option<Tensor>,
}

/// Default mask width: `ceil(0.3 · min(H, W))`.
pub fn default_mask_width(h: usize, w: usize) -> usize {
    libm::ceil(0.3 * h.min(w) as f64) as usize
}

/// Default kernel support: `ceil(3σ)`.
pub fn default_blur_radius(sigma: f64) -> usize {
    (libm::ceil(3.0 * sigma) as usize).max(1)
}

impl ForwardOp {
    pub fn new(kind: OpKind, shape: [usize; 3]) -> Result<Self> {
        let [_, h, w] = shape;
        let mut op = Self {
            kind: kind.clone(),
            shape,
            mask: Vec::new(),
            kernel: None,
        };
        match kind {
            OpKind::Identity => {}
            OpKind::CenterMask { width } => {
                if width > h || width > w {
                    return Err(Error::Config(alloc::format!(
                        "mask width {width} exceeds image {h}x{w}"
                    )));
                }
                let (r0, c0) = ((h - width) / 2, (w - width) / 2);
                op.mask = vec![1.0; h * w];
                for r in r0..r0 + width {
                    for c in c0..c0 + width {
                        op.mask[r * w + c] = 0.0;
                    }
                }
            }
            OpKind::GaussianBlur { sigma, radius } => {
                let k = gaussian_kernel(sigma, radius)?;
                let size = 2 * radius + 1;
                op.kernel = Some(k.reshape(&[1, 1, size, size])?);
            }
        }
        Ok(op)
    }

    pub fn identity(shape: [usize; 3]) -> Self {
        Self::new(OpKind::Identity, shape).expect("identity is always valid")
    }

    pub fn kind(&self) -> &OpKind {
        &self.kind
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// 0/1 plane mask for the center-mask operator.
    pub fn mask(&self) -> Option<&[f64]> {
        matches!(self.kind, OpKind::CenterMask { .. }).then_some(self.mask.as_slice())
    }

    fn check(&self, x: &Tensor, op: &'static str) -> Result<()> {
        x.check_shape(op, &self.shape)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x, "ForwardOp::apply")?;
        match &self.kind {
            OpKind::Identity => Ok(x.clone()),
            OpKind::CenterMask { .. } => Ok(self.masked(x)),
            OpKind::GaussianBlur { .. } => self.convolve(x, false),
        }
    }

    pub fn adjoint(&self, v: &Tensor) -> Result<Tensor> {
        self.check(v, "ForwardOp::adjoint")?;
        match &self.kind {
            OpKind::Identity => Ok(v.clone()),
            OpKind::CenterMask { .. } => Ok(self.masked(v)),
            OpKind::GaussianBlur { .. } => self.convolve(v, true),
        }
    }

    /// `AᵀA x`.
    pub fn normal(&self, x: &Tensor) -> Result<Tensor> {
        self.adjoint(&self.apply(x)?)
    }

    fn masked(&self, x: &Tensor) -> Tensor {
        let plane = self.shape[1] * self.shape[2];
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(plane) {
            chunk
                .iter_mut()
                .zip(&self.mask)
                .for_each(|(v, m)| *v *= m);
        }
        out
    }

    /// Convolution per channel; the adjoint correlates, i.e. convolves with
    /// the point-reflected kernel.
    fn convolve(&self, x: &Tensor, adjoint: bool) -> Result<Tensor> {
        let kernel = self.kernel.as_ref().expect("blur operator has a kernel");
        let kernel = if adjoint {
            let mut flipped = kernel.clone();
            flipped.data_mut().reverse();
            flipped
        } else {
            kernel.clone()
        };
        let [c, h, w] = self.shape;
        let plane = h * w;
        let zero = Tensor::zeros(&[1]);
        let mut out = Vec::with_capacity(x.len());
        for ch in 0..c {
            let slice = Tensor::from_vec(&[1, h, w], x.data()[ch * plane..(ch + 1) * plane].to_vec())?;
            out.extend(conv2d_circular(&slice, &kernel, &zero)?.into_data());
        }
        Tensor::from_vec(&self.shape, out)
    }
}

/// `y = A x + η` with `η ~ N(0, σ_n² I)`; `σ_n = 0` gives `y = A x` exactly.
pub fn make_measurement(op: &ForwardOp, x: &Tensor, sigma_n: f64, rng: &mut Prng) -> Result<Tensor> {
    if !(sigma_n >= 0.0) {
        return Err(Error::Config(alloc::format!("sigma_n must be >= 0, got {sigma_n}")));
    }
    let mut y = op.apply(x)?;
    if sigma_n > 0.0 {
        y.data_mut()
            .iter_mut()
            .for_each(|v| *v += sigma_n * rng.gaussian());
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::randn;

    fn ops(shape: [usize; 3]) -> Vec<ForwardOp> {
        vec![
            ForwardOp::identity(shape),
            ForwardOp::new(OpKind::CenterMask { width: 3 }, shape).unwrap(),
            ForwardOp::new(OpKind::GaussianBlur { sigma: 1.2, radius: 4 }, shape).unwrap(),
        ]
    }

    #[test]
    fn identity_is_bitwise() {
        let mut rng = Prng::new(0);
        let x = randn(&[2, 5, 5], 1.0, &mut rng);
        assert_eq!(ForwardOp::identity([2, 5, 5]).apply(&x).unwrap(), x);
    }

    #[test]
    fn center_mask_rule() {
        let op = ForwardOp::new(OpKind::CenterMask { width: 2 }, [1, 4, 4]).unwrap();
        let y = op.apply(&Tensor::full(&[1, 4, 4], 1.0)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let masked = (1..=2).contains(&r) && (1..=2).contains(&c);
                assert_eq!(y.data()[r * 4 + c], if masked { 0.0 } else { 1.0 });
            }
        }
        assert!(ForwardOp::new(OpKind::CenterMask { width: 5 }, [1, 4, 4]).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let op = ForwardOp::new(OpKind::GaussianBlur { sigma: 2.0, radius: 6 }, [3, 8, 8]).unwrap();
        let y = op.apply(&Tensor::full(&[3, 8, 8], 0.37)).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn dot_tests() {
        let shape = [2, 6, 8];
        let mut rng = Prng::new(1);
        for op in ops(shape) {
            for _ in 0..50 {
                let u = randn(&shape, 1.0, &mut rng);
                let v = randn(&shape, 1.0, &mut rng);
                let lhs = op.apply(&u).unwrap().dot(&v).unwrap();
                let rhs = u.dot(&op.adjoint(&v).unwrap()).unwrap();
                assert!((lhs - rhs).abs() < 1e-8, "{:?}: {lhs} vs {rhs}", op.kind());
            }
        }
    }

    #[test]
    fn mask_is_projection_and_blur_symmetric() {
        let shape = [1, 7, 7];
        let mut rng = Prng::new(2);
        let x = randn(&shape, 1.0, &mut rng);
        let mask = &ops(shape)[1];
        let once = mask.apply(&x).unwrap();
        assert_eq!(mask.apply(&once).unwrap(), once);
        assert_eq!(mask.adjoint(&once).unwrap(), once);
        let blur = &ops(shape)[2];
        let diff = blur.apply(&x).unwrap().max_abs_diff(&blur.adjoint(&x).unwrap()).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let op = ForwardOp::identity([1, 4, 4]);
        assert!(op.apply(&Tensor::zeros(&[1, 4, 5])).is_err());
        assert!(op.adjoint(&Tensor::zeros(&[2, 4, 4])).is_err());
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let mut rng = Prng::new(3);
        let x = randn(&[1, 4, 4], 1.0, &mut rng);
        let op = ForwardOp::identity([1, 4, 4]);
        assert_eq!(make_measurement(&op, &x, 0.0, &mut rng).unwrap(), x);
        assert!(make_measurement(&op, &x, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let shape = [3, 64, 64];
        let x = Tensor::zeros(&shape);
        let op = ForwardOp::identity(shape);
        let y = make_measurement(&op, &x, 0.1, &mut Prng::new(42)).unwrap();
        let again = make_measurement(&op, &x, 0.1, &mut Prng::new(42)).unwrap();
        assert_eq!(y, again);
        let mean = y.mean();
        let std = libm::sqrt(y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64);
        assert!((0.095..=0.105).contains(&std), "std {std}");
    }

    #[test]
    fn defaults() {
        assert_eq!(default_mask_width(16, 16), 5);
        assert_eq!(default_mask_width(64, 64), 20);
        assert_eq!(default_blur_radius(5.0), 15);
    }
}
