//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed and a stream id, so draws never interleave between nodes.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

/// Stream id used for synthetic data generation.
pub const DATA_STREAM: u64 = 1 << 40;
/// Stream id used for initial iterates.
pub const INIT_STREAM: u64 = (1 << 40) + 1;
/// Stream id used for empirical contraction estimates.
pub const OMEGA_STREAM: u64 = (1 << 40) + 2;

pub fn stream(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Random stream owned by worker `node`.
pub fn node_stream(seed: u64, node: usize) -> Stream {
    stream(seed, node as u64)
}
