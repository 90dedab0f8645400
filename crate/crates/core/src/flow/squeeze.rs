//! Space-to-depth reshuffling and channel splitting for the multi-scale stack.

use alloc::vec;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn chw(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ShapeMismatch {
            op,
            expected: vec![0, 0, 0],
            found: x.shape().to_vec(),
        }),
    }
}

/// `C×H×W -> 4C×(H/2)×(W/2)`. Each 2×2 block `[[a, b], [c, d]]` of channel
/// `k` lands in channels `4k..4k+4` in the order `a, b, c, d`.
pub fn squeeze(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x, "squeeze")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(alloc::format!(
            "squeeze needs even spatial dims, got {h}x{w}"
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for k in 0..c {
        for r in 0..h {
            for col in 0..w {
                let oc = 4 * k + 2 * (r % 2) + col % 2;
                out[(oc * h2 + r / 2) * w2 + col / 2] = src[(k * h + r) * w + col];
            }
        }
    }
    Tensor::from_vec(&[4 * c, h2, w2], out)
}

/// Exact inverse of [`squeeze`].
pub fn unsqueeze(x: &Tensor) -> Result<Tensor> {
    let (c4, h2, w2) = chw(x, "unsqueeze")?;
    if c4 % 4 != 0 {
        return Err(Error::Config(alloc::format!(
            "unsqueeze needs a channel count divisible by 4, got {c4}"
        )));
    }
    let (c, h, w) = (c4 / 4, 2 * h2, 2 * w2);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for k in 0..c {
        for r in 0..h {
            for col in 0..w {
                let oc = 4 * k + 2 * (r % 2) + col % 2;
                out[(k * h + r) * w + col] = src[(oc * h2 + r / 2) * w2 + col / 2];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Splits channels into `[0, k)` and `[k, C)`.
pub fn split_channels(x: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = chw(x, "split_channels")?;
    let at = k * h * w;
    let (a, b) = x.data().split_at(at);
    Ok((
        Tensor::from_vec(&[k, h, w], a.to_vec())?,
        Tensor::from_vec(&[c - k, h, w], b.to_vec())?,
    ))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, h, w) = chw(a, "concat_channels")?;
    let (cb, hb, wb) = chw(b, "concat_channels")?;
    if (h, w) != (hb, wb) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn, Prng};

    #[test]
    fn documented_block_order() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = squeeze(&x).unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn round_trip_bitwise() {
        let mut rng = Prng::new(5);
        let x = randn(&[3, 4, 6], 1.0, &mut rng);
        let y = squeeze(&x).unwrap();
        assert_eq!(y.len(), x.len());
        assert_eq!(unsqueeze(&y).unwrap(), x);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(squeeze(&Tensor::zeros(&[1, 3, 2])).is_err());
        assert!(squeeze(&Tensor::zeros(&[1, 2, 5])).is_err());
    }

    #[test]
    fn split_then_concat() {
        let mut rng = Prng::new(6);
        let x = randn(&[4, 2, 3], 1.0, &mut rng);
        let (a, b) = split_channels(&x, 2).unwrap();
        assert_eq!(a.shape(), &[2, 2, 3]);
        assert_eq!(concat_channels(&a, &b).unwrap(), x);
    }
}
