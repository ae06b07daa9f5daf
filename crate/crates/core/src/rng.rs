//! Seeded pseudo-random number generation.
//!
//! All randomness in the crate flows from [`Xorshift64Star`], a 64-bit
//! xorshift generator with a multiplicative output scramble (Vigna 2016):
//!
//! ```text
//! x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27;
//! out = x * 0x2545_F491_4F6C_DD1D   (wrapping)
//! ```
//!
//! The 64-bit state is initialised from a user seed with one round of
//! SplitMix64 (increment `0x9E37_79B9_7F4A_7C15`, finaliser multipliers
//! `0xBF58_476D_1CE4_E5B9` and `0x94D0_49BB_1331_11EB`), which never yields
//! the forbidden all-zero state for any seed other than a pathological
//! fixed point that is remapped below.
//!
//! Independent streams (per epoch, per batch, per sample, ...) are keyed
//! with [`derive_seed`], which folds a list of integers into a base seed by
//! repeated SplitMix64 mixing.

use rand_core::RngCore;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const XORSHIFT_MULT: u64 = 0x2545_F491_4F6C_DD1D;

/// One SplitMix64 output step applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold `keys` into `base`, producing a seed for an independent stream.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// xorshift64* generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Xorshift64Star {
    state: u64,
}

impl Xorshift64Star {
    pub fn new(seed: u64) -> Self {
        let mut state = splitmix64(seed);
        if state == 0 {
            state = SPLITMIX_GAMMA;
        }
        Self { state }
    }

    /// Generator for the stream keyed by `keys` under `base`.
    pub fn keyed(base: u64, keys: &[u64]) -> Self {
        Self::new(derive_seed(base, keys))
    }
}

impl RngCore for Xorshift64Star {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_MULT)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        rand_core::impls::fill_bytes_via_next(self, dst)
    }
}

/// Stream tags so that different consumers of one base seed never collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const GRADCHECK: u64 = 6;
}
