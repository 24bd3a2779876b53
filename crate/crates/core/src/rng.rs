//! Named random streams derived from one run seed.
//!
//! Each consumer (parameter init, batch order, sweep) draws from its own
//! ChaCha stream selected by hashing the consumer's name, so adding a new
//! consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: &str = "init";
pub const BATCH_ORDER: &str = "batch-order";
pub const SWEEP: &str = "sweep";

/// FNV-1a, used only to turn a stream name into a stream id.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}
