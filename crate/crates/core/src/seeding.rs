//! Deterministic seed derivation.
//!
//! Every random stream in a run (parameter init, action sampling, one
//! stream per environment, one seed per episode, evaluation episodes) is
//! derived from the single run seed so that a run is reproducible from
//! its config alone. Training and evaluation use different salts, which
//! keeps their episode seeds disjoint.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Salts for the independent random streams of a run.
pub mod salt {
    pub const PARAM_INIT: u64 = 0x01;
    pub const ACTION_SAMPLING: u64 = 0x02;
    pub const TRAIN_EPISODE: u64 = 0x03;
    pub const EVAL_EPISODE: u64 = 0x04;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of salts into a base seed.
pub fn derive_seed(base: u64, salts: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    for &x in salts {
        s = splitmix64(s ^ splitmix64(x));
    }
    s
}

/// Seeded generator used everywhere randomness is needed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
