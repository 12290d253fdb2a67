//! Named, independent random substreams derived from one master seed.
//!
//! Each `(stage, replicate)` pair maps to its own ChaCha stream, so adding
//! draws to one stage never shifts the numbers seen by another, and replicate
//! `k` is reproducible no matter which worker thread runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Pipeline stages that own a substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Stage {
    Covariates = 1,
    Strata = 2,
    Assignment = 3,
    Recruitment = 4,
    Outcomes = 5,
    Truth = 6,
    Oracle = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Substreams {
    master_seed: u64,
}

impl Substreams {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// RNG for `stage` of replicate `replicate`.
    pub fn stream(&self, stage: Stage, replicate: u64) -> StreamRng {
        assert!(replicate < (1 << 56), "replicate index out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream((replicate << 8) | stage as u64);
        rng
    }
}
