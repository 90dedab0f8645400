//! SplitMix64 stream with uniform and Box–Muller Gaussian sampling.
//!
//! Every stochastic decision in the crate draws from this generator so that a
//! seed reproduces a run bit for bit on any platform.

use core::f64::consts::PI;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Seed for an independent sub-stream, e.g. `derive_seed(seed, &[epoch, index])`.
    pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
        parts.iter().fold(mix(seed.wrapping_add(GOLDEN_GAMMA)), |acc, &p| {
            mix(acc ^ mix(p.wrapping_add(GOLDEN_GAMMA)))
        })
    }

    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        Self::new(Self::derive_seed(seed, parts))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal sample. Consumes exactly two uniforms (cosine branch only).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from an independent SplitMix64 implementation.
    const GOLDEN: [u64; 16] = [
        0x6e789e6aa1b965f4,
        0x06c45d188009454f,
        0xf88bb8a8724c81ec,
        0x1b39896a51a8749b,
        0x53cb9f0c747ea2ea,
        0x2c829abe1f4532e1,
        0xc584133ac916ab3c,
        0x3ee5789041c98ac3,
        0xf3b8488c368cb0a6,
        0x657eecdd3cb13d09,
        0xc2d326e0055bdef6,
        0x8621a03fe0bbdb7b,
        0x8e1f7555983aa92f,
        0xb54e0f1600cc4d19,
        0x84bb3f97971d80ab,
        0x7d29825c75521255,
    ];

    #[test]
    fn golden_sequence() {
        let mut rng = Prng::new(0x9E3779B97F4A7C15);
        for expected in GOLDEN {
            assert_eq!(rng.next_u64(), expected);
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Prng::new(7);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Prng::new(11);
        let n = 200_000;
        let samples: alloc::vec::Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn derived_streams_differ() {
        let a = Prng::derive_seed(5, &[0, 1]);
        let b = Prng::derive_seed(5, &[1, 0]);
        let c = Prng::derive_seed(5, &[0, 1]);
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = Prng::new(3);
        let mut v: alloc::vec::Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<alloc::vec::Vec<_>>());
    }
}
