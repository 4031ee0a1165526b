//! Counter-based seeded randomness.
//!
//! Every draw comes from a ChaCha12 stream keyed by (seed, context words), so
//! any scene, parameter, or noise stream regenerates identically regardless
//! of the order other streams are consumed in. The key derivation is fixed:
//! fold each context word into a splitmix64 state, then take four successive
//! splitmix64 outputs as the 256-bit ChaCha key (little-endian).

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    mix(*state)
}

/// Independent random stream for (seed, context).
pub fn stream(seed: u64, context: &[u64]) -> ChaCha12Rng {
    let mut state = seed;
    for &w in context {
        state = mix(state.wrapping_add(GOLDEN) ^ mix(w.wrapping_add(GOLDEN)));
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&next(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// FNV-1a over UTF-8 bytes, for turning names into context words.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Uniform in [0, 1) with 53 random bits.
pub fn uniform(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform_in(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal via Box-Muller; two uniforms per draw, no caching, so the
/// stream position stays a pure function of the draw count.
pub fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform integer in [0, n).
pub fn pick(rng: &mut ChaCha12Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (uniform(rng) * n as f64) as usize % n
}
