//! Circular 2-D convolution and the Gaussian blur kernel.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

struct ConvDims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<ConvDims> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 3 || ks.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d_circular",
            expected: vec![ks.get(1).copied().unwrap_or(0), 0, 0],
            found: is.to_vec(),
        });
    }
    if ks[1] != is[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_circular (kernel C_in vs input channels)",
            expected: ks.to_vec(),
            found: is.to_vec(),
        });
    }
    if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
        return Err(Error::Config(alloc::format!(
            "conv2d_circular needs odd kernel sizes, got {}x{}",
            ks[2],
            ks[3]
        )));
    }
    bias.check_shape("conv2d_circular (bias)", &ks[..1])?;
    Ok(ConvDims {
        c_in: is[0],
        c_out: ks[0],
        h: is[1],
        w: is[2],
        kh: ks[2],
        kw: ks[3],
    })
}

/// Wrapped source indices: `table[a * n + r] = (r + a - k/2) mod n`.
fn wrap_table(n: usize, k: usize) -> Vec<usize> {
    let half = (k / 2) as isize;
    let mut table = Vec::with_capacity(n * k);
    for a in 0..k as isize {
        for r in 0..n as isize {
            table.push((r + a - half).rem_euclid(n as isize) as usize);
        }
    }
    table
}

/// `out(o,r,c) = bias(o) + Σ_i Σ_{a,b} in(i, r+a-kh/2, c+b-kw/2) · k(o,i,a,b)`
/// with indices taken modulo the image size.
pub fn conv2d_circular(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = conv_dims(input, kernel, bias)?;
    let rows = wrap_table(d.h, d.kh);
    let cols = wrap_table(d.w, d.kw);
    let (x, k, b) = (input.data(), kernel.data(), bias.data());
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.c_out * plane];
    for o in 0..d.c_out {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..d.c_in {
            let src = &x[i * plane..(i + 1) * plane];
            for a in 0..d.kh {
                let row_map = &rows[a * d.h..(a + 1) * d.h];
                for bb in 0..d.kw {
                    let weight = k[((o * d.c_in + i) * d.kh + a) * d.kw + bb];
                    if weight == 0.0 {
                        continue;
                    }
                    let col_map = &cols[bb * d.w..(bb + 1) * d.w];
                    for (r, &sr) in row_map.iter().enumerate() {
                        let src_row = &src[sr * d.w..(sr + 1) * d.w];
                        let dst_row = &mut dst[r * d.w..(r + 1) * d.w];
                        for (dv, &sc) in dst_row.iter_mut().zip(col_map) {
                            *dv += weight * src_row[sc];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[d.c_out, d.h, d.w], out)
}

/// Gradients of [`conv2d_circular`]: returns the input cotangent and adds the
/// kernel and bias cotangents into `grad_kernel` and `grad_bias`.
pub fn conv2d_circular_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    grad_kernel: &mut Tensor,
    grad_bias: &mut Tensor,
) -> Result<Tensor> {
    let d = conv_dims(input, kernel, grad_bias)?;
    grad_out.check_shape("conv2d_circular_backward", &[d.c_out, d.h, d.w])?;
    grad_kernel.check_shape("conv2d_circular_backward (kernel grad)", kernel.shape())?;
    let rows = wrap_table(d.h, d.kh);
    let cols = wrap_table(d.w, d.kw);
    let plane = d.h * d.w;
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; d.c_in * plane];
    let gk = grad_kernel.data_mut();
    for o in 0..d.c_out {
        let g = &go[o * plane..(o + 1) * plane];
        grad_bias.data_mut()[o] += g.iter().sum::<f64>();
        for i in 0..d.c_in {
            let src = &x[i * plane..(i + 1) * plane];
            let gsrc = &mut gx[i * plane..(i + 1) * plane];
            for a in 0..d.kh {
                let row_map = &rows[a * d.h..(a + 1) * d.h];
                for bb in 0..d.kw {
                    let kidx = ((o * d.c_in + i) * d.kh + a) * d.kw + bb;
                    let weight = k[kidx];
                    let col_map = &cols[bb * d.w..(bb + 1) * d.w];
                    let mut acc = 0.0;
                    for (r, &sr) in row_map.iter().enumerate() {
                        let g_row = &g[r * d.w..(r + 1) * d.w];
                        let src_row = &src[sr * d.w..(sr + 1) * d.w];
                        let gsrc_row = &mut gsrc[sr * d.w..(sr + 1) * d.w];
                        for (&gv, &sc) in g_row.iter().zip(col_map) {
                            acc += gv * src_row[sc];
                            gsrc_row[sc] += gv * weight;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    Tensor::from_vec(&[d.c_in, d.h, d.w], gx)
}

/// Normalized `(2r+1)×(2r+1)` Gaussian kernel.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Tensor> {
    if !(sigma > 0.0) || radius < 1 {
        return Err(Error::Config(alloc::format!(
            "gaussian_kernel needs sigma > 0 and radius >= 1 (got sigma={sigma}, radius={radius})"
        )));
    }
    let size = 2 * radius + 1;
    let r = radius as isize;
    let mut data = Vec::with_capacity(size * size);
    for i in -r..=r {
        for j in -r..=r {
            let d2 = (i * i + j * j) as f64;
            data.push(libm::exp(-d2 / (2.0 * sigma * sigma)));
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::from_vec(&[size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Prng;

    fn random(shape: &[usize], rng: &mut Prng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gaussian()).collect()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Prng::new(1);
        let x = random(&[1, 5, 4], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_circular(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn circular_shift() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let y = conv2d_circular(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn averaging_preserves_mean() {
        let mut rng = Prng::new(2);
        let x = random(&[1, 7, 6], &mut rng);
        let k = Tensor::full(&[1, 1, 3, 5], 1.0 / 15.0);
        let y = conv2d_circular(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert!((x.mean() - y.mean()).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_circular(&x, &k, &Tensor::zeros(&[1])).unwrap_err();
        match err {
            Error::ShapeMismatch { expected, found, .. } => {
                assert_eq!(expected, vec![1, 3, 3, 3]);
                assert_eq!(found, vec![2, 4, 4]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn linearity() {
        let mut rng = Prng::new(3);
        let u = random(&[2, 5, 6], &mut rng);
        let v = random(&[2, 5, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[3]);
        let (a, b) = (0.7, -1.3);
        let mut mix = u.scale(a);
        mix.axpy(b, &v).unwrap();
        let lhs = conv2d_circular(&mix, &k, &zero).unwrap();
        let mut rhs = conv2d_circular(&u, &k, &zero).unwrap().scale(a);
        rhs.axpy(b, &conv2d_circular(&v, &k, &zero).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn backward_matches_inner_product_identity() {
        // <conv(x), g> is linear in x, kernel and bias; its gradients must
        // reproduce the value exactly through each argument.
        let mut rng = Prng::new(4);
        let x = random(&[2, 4, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let bias = random(&[3], &mut rng);
        let g = random(&[3, 4, 5], &mut rng);
        let y = conv2d_circular(&x, &k, &bias).unwrap();
        let value = y.dot(&g).unwrap();
        let mut gk = Tensor::zeros(k.shape());
        let mut gb = Tensor::zeros(&[3]);
        let gx = conv2d_circular_backward(&x, &k, &g, &mut gk, &mut gb).unwrap();
        let bias_term = bias.dot(&gb).unwrap();
        assert!((gx.dot(&x).unwrap() + bias_term - value).abs() < 1e-10);
        assert!((gk.dot(&k).unwrap() + bias_term - value).abs() < 1e-10);
    }

    #[test]
    fn gaussian_kernel_properties() {
        for (sigma, radius) in [(0.5, 1), (1.3, 4), (5.0, 15)] {
            let k = gaussian_kernel(sigma, radius).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12);
            let d = k.data();
            let n = d.len();
            for i in 0..n {
                assert_eq!(d[i], d[n - 1 - i]);
            }
        }
        let delta = gaussian_kernel(1e-3, 2).unwrap();
        assert!(delta.data()[12] >= 1.0 - 1e-9);
        assert!(gaussian_kernel(0.0, 2).is_err());
        assert!(gaussian_kernel(1.0, 0).is_err());
    }
}
