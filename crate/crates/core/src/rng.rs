//! Counter-based random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness; each gets its own block of streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Data = 1,
    Split = 2,
    Init = 3,
    TrainStep = 4,
    Rollout = 5,
    Episode = 6,
}

/// The stream for item `index` of `domain` under `seed`.
///
/// Streams never overlap, so draws in one domain cannot shift another's.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}
