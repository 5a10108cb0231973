//! Seeded random streams.
//!
//! Every consumer gets its own ChaCha stream keyed by `(seed, stream id)`, so
//! components can be reproduced independently of each other.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub use rand::Rng as RngExt;
pub use rand_chacha::ChaCha8Rng as Rng;

/// Stream ids for the named substreams of a run.
pub mod streams {
    pub const NET_INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const DATA: u64 = 5;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Per-chain stream for sampling; parallel and serial runs see the same draws.
pub fn chain_stream(seed: u64, chain: usize) -> Rng {
    let mut rng = Rng::seed_from_u64(seed ^ 0x5a4d_504c_4552_0000);
    rng.set_stream(chain as u64);
    rng
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_standard_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// Index drawn from an (unnormalized, nonnegative) weight vector.
pub fn categorical(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = RngExt::random::<f64>(rng) * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
