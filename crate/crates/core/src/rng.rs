//! Seeded random streams.
//!
//! Every trajectory draws from its own ChaCha8 stream: the key is derived from
//! the master seed and the stream id is the trajectory index. ChaCha is a
//! counter-based generator, so streams are independent by construction and a
//! trajectory's draws do not depend on which worker runs it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer, used to derive sub-seeds from a master seed.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named sub-experiment of `master`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    mix(master ^ mix(tag.wrapping_add(0x5EED)))
}

/// Stream `index` of the family keyed by `master`.
pub fn stream(master: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Uniform draw on `[0, 1)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen::<f64>()
}

/// Unit-rate exponential by inverse CDF; always strictly positive.
pub fn unit_exponential<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let e = -(1.0 - uniform(rng)).ln();
        if e > 0.0 {
            return e;
        }
    }
}
