//! Reproducible random streams.
//!
//! Path `k` of a run seeded with `master_seed` draws from the ChaCha8
//! generator keyed by `master_seed`, on stream `2k` for the environment chain
//! and `2k + 1` for Brownian increments. Results depend only on
//! `(master_seed, k)`, never on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Substream {
    Chain,
    Brownian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct StreamId {
    pub master_seed: u64,
    pub path_index: u64,
}

impl StreamId {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        StreamId { master_seed, path_index }
    }

    pub fn rng(&self, sub: Substream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        let offset = match sub {
            Substream::Chain => 0,
            Substream::Brownian => 1,
        };
        rng.set_stream(self.path_index.wrapping_mul(2).wrapping_add(offset));
        rng
    }
}
