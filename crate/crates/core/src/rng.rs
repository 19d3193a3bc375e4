//! Deterministic random streams.
//!
//! One master seed fans out into independent streams so that, for example,
//! changing the batch order does not change parameter initialization.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

const STREAM_INIT: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_GUMBEL: u64 = 3;
const STREAM_DATA: u64 = 4;
const STREAM_BATCH: u64 = 5;

/// All stochastic state of a run.
#[derive(Clone, Debug)]
pub struct RngStreams {
    pub init: Rng,
    pub dropout: Rng,
    pub gumbel: Rng,
    pub data: Rng,
    pub batches: Rng,
}

/// Seeds every stream from one value. Equal seeds give bit-identical
/// dropout masks, Gumbel noise, initializations and generated data.
pub fn seed_all(seed: u64) -> RngStreams {
    RngStreams {
        init: stream(seed, STREAM_INIT),
        dropout: stream(seed, STREAM_DROPOUT),
        gumbel: stream(seed, STREAM_GUMBEL),
        data: stream(seed, STREAM_DATA),
        batches: stream(seed, STREAM_BATCH),
    }
}

pub fn stream(seed: u64, id: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, id))
}

/// SplitMix64 finalizer over `(seed, id)`.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A standard Gumbel draw, `-ln(-ln u)`.
pub fn gumbel(rng: &mut Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random()
}
