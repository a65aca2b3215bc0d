//! Seed derivation and deterministic random streams.
//!
//! Every stochastic choice in the crate flows from a `ChaCha12Rng` whose seed
//! is derived from a user-visible 64-bit seed plus a domain label, so
//! independent subsystems (dataset, probes, training, sampling) never share a
//! stream by accident and every run is reproducible from its config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// SplitMix64 step; the standard 64-bit mixer used for seed derivation.
pub fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a base seed with a sequence of stream labels into one 64-bit seed.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    let mut state = base;
    let mut out = mix(base ^ 0xA076_1D64_78BD_642F);
    for &label in labels {
        splitmix64(&mut state);
        out = mix(out ^ mix(state ^ label));
    }
    out
}

/// A ChaCha stream for `(base seed, labels...)`.
pub fn stream(base: u64, labels: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, labels))
}

/// Stable label constants for the crate's stream domains.
pub mod labels {
    pub const IDENTITY: u64 = 0x01;
    pub const ATTRIBUTES: u64 = 0x02;
    pub const DATASET: u64 = 0x03;
    pub const PROBE_INIT: u64 = 0x04;
    pub const PROBE_TRAIN: u64 = 0x05;
    pub const NET_INIT: u64 = 0x06;
    pub const TRAIN_STEP: u64 = 0x07;
    pub const SAMPLER: u64 = 0x08;
    pub const EVAL: u64 = 0x09;
}

/// Draw `n` standard normals into a fresh vector.
pub fn normal_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Uniform draw in `[lo, hi]`.
pub fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        let a = derive_seed(7, &[labels::IDENTITY, 3]);
        let b = derive_seed(7, &[labels::IDENTITY, 3]);
        let c = derive_seed(7, &[labels::IDENTITY, 4]);
        let d = derive_seed(8, &[labels::IDENTITY, 3]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn streams_reproduce() {
        let x: Vec<f64> = normal_vec(&mut stream(1, &[2]), 8);
        let y: Vec<f64> = normal_vec(&mut stream(1, &[2]), 8);
        assert_eq!(x, y);
    }
}
