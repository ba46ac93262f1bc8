//! Named, splittable seed streams.
//!
//! Every stochastic draw in the crate flows through a [`SeedStream`] derived
//! from a base seed plus a stream tag, so any run is reproducible from its
//! config. Gaussian variates use Box-Muller on top of ChaCha8 so the stream
//! is identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; used to derive child seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a stream index.
///
/// Used for ensemble members (`member_seed = derive_seed(base, member_index)`),
/// rollout passes, per-parameter init streams and the like.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix(base ^ mix(index.wrapping_add(1)))
}

/// Derive a child seed from a base seed and a string tag.
pub fn derive_seed_tagged(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag bytes, then mixed with the base.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(base ^ mix(h))
}

/// Deterministic random stream with uniform and Gaussian draws.
pub struct SeedStream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.random_range(0..n)
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        self.rng.random_range(lo..=hi)
    }

    /// Standard normal via Box-Muller (pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1]: avoid ln(0).
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}
