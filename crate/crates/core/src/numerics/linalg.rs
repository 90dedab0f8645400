//! Small dense matrix routines for the 1×1 convolution weights.

use alloc::vec;
use alloc::vec::Vec;

use super::{Prng, Tensor};
use crate::error::{Error, Result};

const SINGULAR_TOL: f64 = 1e-12;
const MAX_DIM: usize = 64;

fn square_dim(m: &Tensor, op: &'static str) -> Result<usize> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![s.first().copied().unwrap_or(0); 2],
            found: s.to_vec(),
        });
    }
    if s[0] > MAX_DIM {
        return Err(Error::Config(alloc::format!(
            "{op}: matrix dimension {} exceeds {MAX_DIM}",
            s[0]
        )));
    }
    Ok(s[0])
}

/// Determinant and inverse by LU decomposition with partial pivoting.
pub fn small_det_inv(m: &Tensor) -> Result<(f64, Tensor)> {
    let n = square_dim(m, "small_det_inv")?;
    let mut lu = m.data().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| lu[a * n + col].abs().total_cmp(&lu[b * n + col].abs()))
            .unwrap_or(col);
        if pivot != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot * n + j);
            }
            perm.swap(col, pivot);
            det = -det;
        }
        let p = lu[col * n + col];
        det *= p;
        if p == 0.0 {
            return Err(Error::SingularMatrix { det: 0.0 });
        }
        for row in col + 1..n {
            let factor = lu[row * n + col] / p;
            lu[row * n + col] = factor;
            for j in col + 1..n {
                lu[row * n + j] -= factor * lu[col * n + j];
            }
        }
    }
    if det.abs() < SINGULAR_TOL {
        return Err(Error::SingularMatrix { det });
    }
    // Solve L U x = P e_j for every column j.
    let mut inv = vec![0.0; n * n];
    let mut col_buf = vec![0.0; n];
    for j in 0..n {
        for (i, v) in col_buf.iter_mut().enumerate() {
            *v = if perm[i] == j { 1.0 } else { 0.0 };
        }
        for i in 0..n {
            let mut s = col_buf[i];
            for k in 0..i {
                s -= lu[i * n + k] * col_buf[k];
            }
            col_buf[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = col_buf[i];
            for k in i + 1..n {
                s -= lu[i * n + k] * col_buf[k];
            }
            col_buf[i] = s / lu[i * n + i];
        }
        for i in 0..n {
            inv[i * n + j] = col_buf[i];
        }
    }
    Ok((det, Tensor::from_vec(&[n, n], inv)?))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: sa.to_vec(),
            found: sb.to_vec(),
        });
    }
    let (n, k, m) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = ad[i * k + l];
            for j in 0..m {
                out[i * m + j] += av * bd[l * m + j];
            }
        }
    }
    Tensor::from_vec(&[n, m], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let s = a.shape();
    let (n, m) = (s[0], s[1]);
    let d = a.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    Tensor::from_vec(&[m, n], out).expect("transpose preserves length")
}

pub fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// Uniformly random rotation: QR of a Gaussian matrix with the signs of `R`'s
/// diagonal folded into `Q`, then one column flipped if needed so `det = +1`.
pub fn random_rotation(n: usize, rng: &mut Prng) -> Tensor {
    let g: Vec<f64> = (0..n * n).map(|_| rng.gaussian()).collect();
    // Modified Gram–Schmidt over columns.
    let mut q = vec![0.0; n * n];
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| g[i * n + j]).collect();
        for k in 0..j {
            let dot: f64 = (0..n).map(|i| q[i * n + k] * v[i]).sum();
            for i in 0..n {
                v[i] -= dot * q[i * n + k];
            }
        }
        // r_jj = ‖v‖ > 0, so the sign correction is already absorbed.
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        for i in 0..n {
            q[i * n + j] = v[i] / norm;
        }
    }
    let mut q = Tensor::from_vec(&[n, n], q).expect("n*n entries");
    if let Ok((det, _)) = small_det_inv(&q) {
        if det < 0.0 {
            for i in 0..n {
                q.data_mut()[i * n] = -q.data()[i * n];
            }
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn well_conditioned(n: usize, rng: &mut Prng) -> Tensor {
        let mut m = identity(n).scale(n as f64);
        m.data_mut().iter_mut().for_each(|v| *v += rng.gaussian());
        m
    }

    #[test]
    fn identity_inverse() {
        let (det, inv) = small_det_inv(&identity(5)).unwrap();
        assert_eq!(det, 1.0);
        assert_eq!(inv, identity(5));
    }

    #[test]
    fn permutation_is_self_inverse() {
        let p = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (det, inv) = small_det_inv(&p).unwrap();
        assert_eq!(det, -1.0);
        assert_eq!(inv, p);
    }

    #[test]
    fn residual_and_det_product() {
        let mut rng = Prng::new(9);
        for n in [1, 2, 4, 7] {
            let m = well_conditioned(n, &mut rng);
            let (det, inv) = small_det_inv(&m).unwrap();
            let prod = matmul(&m, &inv).unwrap();
            assert!(prod.max_abs_diff(&identity(n)).unwrap() < 1e-10);
            let (det_inv, _) = small_det_inv(&inv).unwrap();
            assert!((det * det_inv - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_is_rejected() {
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(small_det_inv(&m), Err(Error::SingularMatrix { .. })));
        assert!(small_det_inv(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn rotation_is_orthogonal_with_unit_det() {
        let mut rng = Prng::new(10);
        for n in [2, 4, 8] {
            let q = random_rotation(n, &mut rng);
            let qtq = matmul(&transpose(&q), &q).unwrap();
            assert!(qtq.max_abs_diff(&identity(n)).unwrap() < 1e-12);
            let (det, _) = small_det_inv(&q).unwrap();
            assert!((det - 1.0).abs() < 1e-12);
        }
    }
}
