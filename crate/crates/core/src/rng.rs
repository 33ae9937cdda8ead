//! Named, reproducible random streams.
//!
//! Every stochastic consumer draws from its own ChaCha stream derived from a
//! master seed plus a `(chain, purpose)` label, so occupancy draws and latent
//! draws can be replayed independently of each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a stream for `(chain, purpose)` from `master`.
pub fn stream(master: u64, chain: u64, purpose: &str) -> StreamRng {
    let s = splitmix(splitmix(master) ^ splitmix(chain.wrapping_add(1)) ^ label_hash(purpose));
    ChaCha8Rng::seed_from_u64(s)
}

/// The pair of streams a Markov chain consumes while sampling.
#[derive(Debug, Clone)]
pub struct ChainRng {
    pub occupancy: StreamRng,
    pub latent: StreamRng,
}

impl ChainRng {
    pub fn new(master: u64, chain: u64) -> Self {
        ChainRng {
            occupancy: stream(master, chain, "occupancy"),
            latent: stream(master, chain, "latent"),
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
