//! Deterministic RNG streams.
//!
//! Every replica draws from its own ChaCha stream selected by
//! `(seed, stream id)`, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for `(study tag, N index, replica)`; keeps the triples disjoint.
pub fn stream_id(tag: u16, group: u16, replica: u32) -> u64 {
    ((tag as u64) << 48) | ((group as u64) << 32) | replica as u64
}
