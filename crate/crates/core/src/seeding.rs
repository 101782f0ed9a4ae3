//! Named random substreams derived from one master seed.
//!
//! Every generator draws from its own ChaCha stream so that changing how one
//! quantity is sampled never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent substreams of a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Topology = 1,
    TrueSignal = 2,
    Measurement = 3,
    Noise = 4,
    /// Per-row experiment parameters such as a randomly drawn connectivity ratio.
    Parameters = 5,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
