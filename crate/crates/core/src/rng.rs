//! Seeded random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 generator keyed by
//! a user seed and a fixed stream id, so that independent consumers (data
//! noise, prototypes, weight init, per-epoch shuffles) never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_PROTOTYPES: u64 = 1;
pub const STREAM_SAMPLES: u64 = 2;
pub const STREAM_SPLIT: u64 = 3;
pub const STREAM_INIT: u64 = 4;
pub const STREAM_SAMPLER: u64 = 5;
/// Per-epoch shuffles use `STREAM_EPOCH_BASE + epoch`.
pub const STREAM_EPOCH_BASE: u64 = 1 << 32;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
