//! Seeded random streams.
//!
//! Every random quantity in a run derives from one seed. Components draw from
//! separate ChaCha streams so that, say, changing the number of training
//! batches does not perturb the sampling draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Training = 3,
    Sampling = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
