//! Counter-based random streams.
//!
//! Every independent unit of Monte Carlo work (a regeneration cycle, a
//! trajectory, a noise realization) draws from its own ChaCha stream keyed by
//! `(seed, stream index)`. Results therefore do not depend on how the work is
//! split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
